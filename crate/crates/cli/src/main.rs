//! `ranlen` command-line tool.
//!
//! Failures exit non-zero and print one JSON object on stderr:
//! `{"error": "...", "kind": "bad_args" | "data" | "numeric"}` with exit
//! codes 2, 3 and 4 respectively.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ranlen::checkpoint::Checkpoint;
use ranlen::data::{self, SynthOptions};
use ranlen::masks::{self, BandMode, CircleSpec};
use ranlen::trainer::{self, EvalOptions, TrainConfig, TrainEvent};
use ranlen::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "ranlen", version, about = "Mask-conditioned local low-light enhancement")]
struct Cli {
    /// Log verbosity on stderr: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: tracing::Level,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset (low/ and high/ PNG folders).
    GenData(GenDataArgs),
    /// Train a model; progress is printed as JSON lines on stdout.
    Train(TrainArgs),
    /// Score a checkpoint on a paired dataset; prints JSON lines.
    Eval(EvalArgs),
    /// Enhance one image inside a mask.
    Enhance(EnhanceArgs),
    /// Turn a binary area map into a two-channel mask by dilation or erosion.
    Mask(MaskArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of pairs.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Image size, `S` for square or `HxW`.
    #[arg(long, default_value = "64")]
    size: String,
    /// Generator seed; equal seeds give byte-identical files.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the noise added to low images.
    #[arg(long, default_value_t = SynthOptions::default().noise_sigma)]
    noise: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Small-machine profile: synthetic 64×64 data and a short run.
    #[arg(long)]
    desk: bool,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured step budget.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Print every this many steps (epoch summaries are always printed).
    #[arg(long, default_value_t = 1)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root with low/ and high/ folders.
    #[arg(long)]
    data: PathBuf,
    /// Seed of the evaluation masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resize so the long edge has this many pixels.
    #[arg(long)]
    resize: Option<usize>,
    /// Also report full-frame masked PSNR divided by area-A coverage.
    #[arg(long)]
    literal_psnr: bool,
    /// Print only the summary line.
    #[arg(long)]
    summary_only: bool,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Checkpoint to run.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    /// Two-channel mask PNG (R = area A, G = areas A and B).
    #[arg(long, conflicts_with = "circle", required_unless_present = "circle")]
    mask: Option<PathBuf>,
    /// Circle mask `cx,cy,r1,r2` in pixels.
    #[arg(long)]
    circle: Option<String>,
    /// Light degree; values below 1 brighten, above 1 darken.
    #[arg(long, default_value_t = 1.0)]
    degree: f64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("op").required(true).args(["dilate", "erode"])))]
struct MaskArgs {
    /// Binary map (any image; luminance ≥ 128 is set).
    #[arg(long)]
    from: PathBuf,
    /// Treat the map as area A and grow the band outward by this radius.
    #[arg(long)]
    dilate: Option<usize>,
    /// Treat the map as areas A and B and shrink area A by this radius.
    #[arg(long)]
    erode: Option<usize>,
    /// Output two-channel mask PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Checkpoint files or directories of `*.ckpt` files.
    #[arg(long, required = true, num_args = 1..)]
    ckpt: Vec<PathBuf>,
    /// Interface to bind.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// TCP port to bind.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Allowed browser origin for CORS; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
    /// Concurrent inference jobs.
    #[arg(long, default_value_t = 2)]
    workers: usize,
}

struct Failure {
    kind: ErrorKind,
    message: String,
}

impl Failure {
    fn bad_args(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::BadArgs,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::BadArgs => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            ErrorKind::BadArgs => "bad_args",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

impl From<ranlen::Error> for Failure {
    fn from(e: ranlen::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::bad_args(e.to_string().trim_end())),
    };
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Enhance(a) => enhance(a),
        Command::Mask(a) => mask(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let body = serde_json::json!({ "error": f.message, "kind": f.kind_name() });
    eprintln!("{body}");
    ExitCode::from(f.exit_code())
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::bad_args(format!("size '{s}' must be S or HxW with positive integers"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let (h, w) = parse_size(&a.size)?;
    let opts = SynthOptions {
        noise_sigma: a.noise,
        ..SynthOptions::default()
    };
    let samples = data::synth_pairs_with(a.n, h, w, a.seed, &opts)?;
    data::save_paired_dir(&a.out, &samples)?;
    println!("{}", serde_json::json!({ "pairs": samples.len(), "out": a.out }));
    Ok(())
}

fn print_line(value: &impl serde::Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(value).expect("serialisable"));
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if a.desk {
        cfg = cfg.with_desk_profile();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let (train_set, val_set) = cfg.load_data()?;
    tracing::info!(train = train_set.len(), validation = val_set.len(), "data loaded");
    let every = a.log_every.max(1);
    let outcome = trainer::train(&cfg, &train_set, &val_set, |event| match event {
        TrainEvent::Step(s) if s.step % every == 0 || s.step == 1 => {
            print_line(&serde_json::json!({ "event": "step", "record": s }))
        }
        TrainEvent::Epoch(e) => print_line(&serde_json::json!({ "event": "epoch", "record": e })),
        _ => {}
    })?;
    outcome.checkpoint.save(&a.out)?;
    print_line(&serde_json::json!({
        "event": "done",
        "checkpoint": a.out,
        "steps": outcome.checkpoint.step,
        "epochs": outcome.checkpoint.epoch,
    }));
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let samples = data::load_paired_dir(&a.data, a.resize)?.samples;
    let opts = EvalOptions {
        seed: a.seed,
        literal_psnr: a.literal_psnr,
        ..EvalOptions::default()
    };
    let result = trainer::evaluate_checkpoint(&ckpt, &samples, &opts)?;
    if !a.summary_only {
        for r in &result.reports {
            println!("{}", r.to_json_line());
        }
    }
    print_line(&serde_json::json!({ "summary": result.summary }));
    Ok(())
}

fn enhance(a: EnhanceArgs) -> CmdResult {
    if !(a.degree > 0.0 && a.degree.is_finite()) {
        return Err(Failure::bad_args(format!("--degree must be positive, got {}", a.degree)));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let img = data::load_image(&a.image)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mask = match (&a.mask, &a.circle) {
        (Some(p), None) => {
            let m = masks::load_mask(p)?;
            if (m.height(), m.width()) != (h, w) {
                return Err(Failure::bad_args(format!(
                    "mask is {}×{} but the image is {h}×{w}",
                    m.height(),
                    m.width()
                )));
            }
            m
        }
        (None, Some(spec)) => {
            let c = CircleSpec::parse(spec)?;
            if !c.center_within(h, w) {
                return Err(Failure::bad_args(format!("circle center lies outside the {h}×{w} image")));
            }
            c.rasterize(h, w)
        }
        _ => return Err(Failure::bad_args("give exactly one of --mask or --circle")),
    };
    let out = ranlen::enhance_rgb(&ckpt.model()?, &ckpt.params, &img, &mask, a.degree)?;
    data::save_png(&a.out, &out)?;
    Ok(())
}

fn mask(a: MaskArgs) -> CmdResult {
    let (mode, radius) = match (a.dilate, a.erode) {
        (Some(r), None) => (BandMode::DilateOut, r),
        (None, Some(r)) => (BandMode::ErodeIn, r),
        _ => return Err(Failure::bad_args("give exactly one of --dilate or --erode")),
    };
    let map = masks::load_binary_map(&a.from)?;
    let derived = masks::derive_band(&map, mode, radius)?;
    if derived.empty_inner {
        let why = derived
            .warning()
            .unwrap_or_else(|| "the input map has no set pixels, so area A is empty".into());
        return Err(Failure {
            kind: ErrorKind::Data,
            message: why,
        });
    }
    masks::save_mask(&a.out, &derived.mask)?;
    let p = derived.mask.partition();
    print_line(&serde_json::json!({ "out": a.out, "r_a": p.r_a, "r_b": p.r_b, "r_c": p.r_c }));
    Ok(())
}

fn serve(a: ServeArgs) -> CmdResult {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::from(ranlen::Error::Io(e)))?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::bad_args(format!("cannot bind {addr}: {e}")))?;
        let state = ranlen_service::AppState::loading(a.workers);
        let loader = ranlen_service::spawn_load(state.clone(), a.ckpt.clone());
        let opts = ranlen_service::ServeOptions {
            cors_origin: a.cors_origin.clone(),
        };
        let app = ranlen_service::router(state, &opts);
        tracing::info!(%addr, "listening");
        print_line(&serde_json::json!({ "listening": addr }));
        let server = tokio::spawn(async move { axum::serve(listener, app).await });
        match loader.await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(e.into()),
            Err(e) => return Err(Failure::from(ranlen::Error::Data(e.to_string()))),
        }
        match server.await {
            Ok(res) => res.map_err(|e| Failure::from(ranlen::Error::Io(e))),
            Err(e) => Err(Failure::from(ranlen::Error::Data(e.to_string()))),
        }
    })?;
    Ok(())
}
