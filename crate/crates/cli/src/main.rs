//! `onloadrt`: calibrate, serve, run and sweep split CNN inference.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use onloadrt_core::graph::NodeId;
use onloadrt_core::ispm::{error_bound, pack, unpack, Codec, PackedTensor, PackingPolicy, Precision};
use onloadrt_core::model::Model;
use onloadrt_core::profiler::{calibrate, CalibrationSpec, LoadState, ProfileDB};
use onloadrt_core::reference::{reference_model, relu_tensor, seeded_inputs, uniform_tensor};
use onloadrt_core::runtime::{
    run_pipelined, serve, Client, ClientOptions, ComputeEmulation, ServerOptions, Session,
};
use onloadrt_core::scheduler::{full_space, schedule, CostInputs, Slo};
use onloadrt_core::sweep::{run_sweep, write_csv, LiveSpec, SweepAxis, SweepSpec};
use onloadrt_core::Tensor;

use config::{read_sweep_file, resolve_link, LinkConfig, SweepFile};

#[derive(Parser)]
#[command(name = "onloadrt", version, about = "Split CNN inference between a client and a server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded reference model and its weights.
    InitModel {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        model: ModelPaths,
    },
    /// Write a seeded tensor file.
    InitTensor {
        #[arg(long)]
        seed: u64,
        /// relu (sparse activations) or uniform (dense noise).
        #[arg(long, default_value = "relu")]
        kind: String,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', default_value = "64,32,32")]
        shape: Vec<usize>,
        /// Fraction of zeros for relu tensors.
        #[arg(long, default_value_t = 0.9)]
        zeros: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a model on seeded inputs and write its profile.
    Profile {
        #[command(flatten)]
        model: ModelPaths,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Bitwidths to profile; `fp32` adds uncompressed transfer.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,fp32")]
        bitwidth: Vec<String>,
        #[arg(long, default_value = "lz4")]
        codec: String,
        /// Only consider splits right after a ReLU.
        #[arg(long)]
        relu_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the suffix of a model until killed.
    Serve {
        #[command(flatten)]
        model: ModelPaths,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Stretch server compute by this factor.
        #[arg(long, default_value_t = 1.0)]
        server_slowdown: f64,
    },
    /// Run inferences one at a time against a server.
    Infer(RunArgs),
    /// Stream inferences through the three-stage client pipeline.
    RunPipelined {
        #[command(flatten)]
        run: RunArgs,
        /// Completions excluded from the throughput.
        #[arg(long, default_value_t = 20)]
        warmup: usize,
    },
    /// Sweep one parameter and write predicted (and optionally measured)
    /// metrics of each scheduler variant as CSV.
    Sweep(SweepArgs),
    /// Pack a tensor file into a single packed record.
    Pack {
        #[arg(long)]
        input: PathBuf,
        /// 1 to 16, or fp32.
        #[arg(long)]
        bitwidth: String,
        #[arg(long, default_value = "lz4")]
        codec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unpack a packed record back into a tensor file.
    Unpack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelPaths {
    /// Graph description.
    #[arg(long)]
    model: PathBuf,
    /// Weight blob.
    #[arg(long)]
    weights: PathBuf,
}

impl ModelPaths {
    fn load(&self) -> Result<Model> {
        Model::load(&self.model, &self.weights).context("loading model")
    }

    fn load_optional(model: &Option<PathBuf>, weights: &Option<PathBuf>) -> Result<Option<Model>> {
        match (model, weights) {
            (Some(m), Some(w)) => Ok(Some(Model::load(m, w).context("loading model")?)),
            (None, None) => Ok(None),
            _ => bail!("--model and --weights go together"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelPaths,
    /// Server address.
    #[arg(long, default_value = "127.0.0.1:7878")]
    connect: String,
    /// `none`, a preset (ethernet, wifi, 4g, 3g) or a link file.
    #[arg(long, default_value = "none")]
    link: String,
    /// Tensor files to run; otherwise `--count` seeded inputs.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Seeds generated inputs and link jitter.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Fixed split; without it the split is scheduled from `--profile`.
    #[arg(long)]
    split: Option<NodeId>,
    /// Fixed bitwidth for `--split` (1 to 16, or fp32).
    #[arg(long, default_value = "fp32")]
    bitwidth: String,
    #[arg(long, default_value = "lz4")]
    codec: String,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Hard constraint in priority order, e.g. `latency<=100ms`.
    #[arg(long)]
    hard: Vec<String>,
    /// Soft target in priority order, e.g. `min:server_cost`.
    #[arg(long)]
    soft: Vec<String>,
    /// Stretch client compute by this factor.
    #[arg(long, default_value_t = 1.0)]
    client_slowdown: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML file with defaults for every other option.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// bandwidth (Mbit/s), client-slowdown (factor) or deadline (ms).
    #[arg(long)]
    axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    points: Vec<f64>,
    #[arg(long)]
    link: Option<String>,
    /// Base multiplier on the client load factor.
    #[arg(long)]
    client_slowdown: Option<f64>,
    #[arg(long)]
    server_slowdown: Option<f64>,
    #[arg(long)]
    hard: Vec<String>,
    #[arg(long)]
    soft: Vec<String>,
    /// Compare single inferences instead of pipelined streams.
    #[arg(long)]
    unpipelined: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run every selected configuration over loopback.
    #[arg(long)]
    live: bool,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seeds the live inputs.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 60)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        // A reader that stops early (`| head`) is not a failure.
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message wrapping them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::InitModel { seed, model } => {
            reference_model(seed).save(&model.model, &model.weights)?;
            println!("wrote {} and {}", model.model.display(), model.weights.display());
            Ok(())
        }
        Command::InitTensor { seed, kind, shape, zeros, out } => {
            let t = match kind.as_str() {
                "relu" => {
                    if !(0.0..1.0).contains(&zeros) {
                        bail!("--zeros must be in [0, 1)");
                    }
                    relu_tensor(shape, zeros, seed)
                }
                "uniform" => uniform_tensor(shape, -1.0, 1.0, seed),
                other => bail!("unknown tensor kind `{other}` (expected relu or uniform)"),
            };
            write_tensor(&out, &t)?;
            println!("wrote {} {:?}", out.display(), t.shape());
            Ok(())
        }
        Command::Profile { model, seed, count, bitwidth, codec, relu_only, out } => {
            cmd_profile(&model, seed, count, &bitwidth, &codec, relu_only, &out)
        }
        Command::Serve { model, listen, server_slowdown } => {
            let model = Arc::new(model.load()?);
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            println!("serving on {}", listener.local_addr()?);
            let options = ServerOptions { compute: slowdown(server_slowdown)? };
            serve(listener, model, options, &AtomicBool::new(false));
            Ok(())
        }
        Command::Infer(args) => cmd_infer(&args),
        Command::RunPipelined { run, warmup } => cmd_run_pipelined(&run, warmup),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Pack { input, bitwidth, codec, out } => cmd_pack(&input, &bitwidth, &codec, &out),
        Command::Unpack { input, out } => cmd_unpack(&input, &out),
    }
}

fn slowdown(k: f64) -> Result<ComputeEmulation> {
    if !(k >= 1.0) || !k.is_finite() {
        bail!("slowdown factors must be at least 1, got {k}");
    }
    Ok(if k == 1.0 { ComputeEmulation::None } else { ComputeEmulation::Slowdown(k) })
}

fn parse_policy(bitwidth: &str, codec: &str) -> Result<PackingPolicy> {
    let precision: Precision = bitwidth.parse()?;
    let codec: Codec = codec.parse()?;
    Ok(match precision {
        Precision::Passthrough => PackingPolicy::passthrough(),
        p => PackingPolicy::new(p, codec),
    })
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Tensor::read_from(BufReader::new(file)).with_context(|| format!("reading tensor {}", path.display()))
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    t.write_to(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn load_profile(path: &Path) -> Result<ProfileDB> {
    ProfileDB::load(path).with_context(|| format!("loading profile {}", path.display()))
}

fn cmd_profile(
    model: &ModelPaths,
    seed: u64,
    count: usize,
    bitwidth: &[String],
    codec: &str,
    relu_only: bool,
    out: &Path,
) -> Result<()> {
    let m = model.load()?;
    let precisions = bitwidth
        .iter()
        .map(|b| b.parse::<Precision>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let spec = CalibrationSpec::candidates(&m, relu_only, precisions, codec.parse()?);
    let inputs = seeded_inputs(m.graph().input_shape(), seed, count);
    let db = calibrate(&m, &inputs, &spec)?;
    db.save(out)?;
    println!(
        "profiled {} splits x {} precisions on {} inputs -> {}",
        db.splits.len(),
        db.precisions.len(),
        count,
        out.display()
    );
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "split  prefix_ms  suffix_ms  precision  pack_ms  dep_bytes  acc_delta_pp")?;
    for (s, p, e) in db.configs() {
        writeln!(
            stdout,
            "{s:>5}  {:>9.4}  {:>9.4}  {p:>9}  {:>7.4}  {:>9.1}  {:>12.2}",
            db.prefix_ms(s),
            db.suffix_ms(s),
            e.pack_ms,
            e.dep_bytes,
            e.acc_delta
        )?;
    }
    Ok(())
}

/// Loaded model, inputs, link and a connected client.
struct Prepared {
    model: Arc<Model>,
    inputs: Vec<Tensor>,
    link: LinkConfig,
    client: Client,
}

fn prepare(args: &RunArgs) -> Result<Prepared> {
    let model = Arc::new(args.model.load()?);
    let inputs = if args.input.is_empty() {
        let seed = args.seed.ok_or_else(|| anyhow!("pass --input files or --seed for generated inputs"))?;
        seeded_inputs(model.graph().input_shape(), seed, args.count)
    } else {
        args.input.iter().map(|p| read_tensor(p)).collect::<Result<Vec<_>>>()?
    };
    let link = resolve_link(&args.link)?;
    let mut options = ClientOptions::new(link.link.clone());
    options.compute = slowdown(args.client_slowdown)?;
    if link.jitter_ms > 0.0 {
        let seed = args.seed.ok_or_else(|| anyhow!("link jitter needs --seed"))?;
        options.jitter = Some((link.jitter_ms, seed));
    }
    let client = Client::connect(&args.connect, model.clone(), options)
        .with_context(|| format!("connecting to {}", args.connect))?;
    Ok(Prepared { model, inputs, link, client })
}

fn slo_or_default(hard: &[String], soft: &[String], default_soft: &str) -> Result<Slo> {
    if soft.is_empty() {
        Ok(Slo::parse(hard, &[default_soft.to_string()])?)
    } else {
        Ok(Slo::parse(hard, soft)?)
    }
}

fn cmd_infer(args: &RunArgs) -> Result<()> {
    let Prepared { model, inputs, link, client } = prepare(args)?;
    let output = model.graph().output_id();
    if let Some(split) = args.split {
        let policy = parse_policy(&args.bitwidth, &args.codec)?;
        let mut client = client;
        for (i, input) in inputs.into_iter().enumerate() {
            let out = client.infer(input, split, policy)?;
            print_inference(i, split, policy.precision, &out.logits, &out.timing);
        }
        return Ok(());
    }
    let path = args.profile.as_ref().ok_or_else(|| anyhow!("pass --split or --profile"))?;
    let profile = load_profile(path)?;
    if profile.model_digest != model.digest() {
        bail!("{} was calibrated for a different model", path.display());
    }
    if profile.output_id() != output {
        bail!("{} does not match the model graph", path.display());
    }
    let slo = slo_or_default(&args.hard, &args.soft, "min:latency")?;
    let space = full_space(&profile);
    let mut session = Session::new(client, profile, slo, space, false, link.historical)?;
    for (i, input) in inputs.into_iter().enumerate() {
        let d = *session.decision();
        let (out, changed) = session.infer(input)?;
        print_inference(i, d.split, d.precision, &out.logits, &out.timing);
        if changed {
            let next = session.decision();
            println!(
                "rescheduled: split {} at {} (best effort: {})",
                next.split, next.precision, next.best_effort
            );
        }
    }
    Ok(())
}

fn print_inference(
    i: usize,
    split: NodeId,
    precision: Precision,
    logits: &Tensor,
    t: &onloadrt_core::runtime::Timing,
) {
    println!(
        "#{i} top1={} split={split} precision={precision} bytes={} device_ms={:.3} pack_ms={:.3} uplink_ms={:.3} \
         server_ms={:.3} downlink_ms={:.3} total_ms={:.3}",
        logits.argmax(),
        t.request_bytes,
        t.device_ms,
        t.pack_ms,
        t.uplink_ms,
        t.server_ms,
        t.downlink_ms,
        t.total_ms
    );
}

fn cmd_run_pipelined(args: &RunArgs, warmup: usize) -> Result<()> {
    let Prepared { model, inputs, link, mut client } = prepare(args)?;
    let (split, policy) = match args.split {
        Some(split) => (split, parse_policy(&args.bitwidth, &args.codec)?),
        None => {
            let path = args.profile.as_ref().ok_or_else(|| anyhow!("pass --split or --profile"))?;
            let profile = load_profile(path)?;
            if profile.model_digest != model.digest() {
                bail!("{} was calibrated for a different model", path.display());
            }
            let slo = slo_or_default(&args.hard, &args.soft, "max:throughput")?;
            let load = LoadState { sf_client: args.client_slowdown, sf_server: 1.0 };
            let inputs = CostInputs { link: link.historical, load };
            let d = schedule(&profile, &full_space(&profile), &slo, &inputs, true)?;
            println!(
                "scheduled split {} at {} (predicted {:.2}/s, best effort: {})",
                d.split, d.precision, d.predicted.throughput, d.best_effort
            );
            (d.split, profile.policy(d.precision))
        }
    };
    let n = inputs.len();
    let report = run_pipelined(&mut client, inputs, split, policy, warmup)?;
    for (i, logits) in report.outputs.iter().enumerate() {
        println!("#{i} top1={} latency_ms={:.3}", logits.argmax(), report.latency_ms[i]);
    }
    let s = report.stage_ms;
    let o = report.occupancy;
    println!(
        "requests={n} split={split} precision={} throughput={:.3}/s wall_ms={:.1} mean_request_bytes={:.1}",
        policy.precision, report.throughput, report.wall_ms, report.mean_request_bytes
    );
    println!(
        "stage_ms inference={:.3} packing={:.3} network={:.3} server={:.3}",
        s.inference, s.packing, s.network, s.server
    );
    println!(
        "occupancy inference={:.3} packing={:.3} network={:.3} server={:.3}",
        o.inference, o.packing, o.network, o.server
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => read_sweep_file(path)?,
        None => SweepFile::default(),
    };
    let profile_path = args
        .profile
        .or(file.profile)
        .ok_or_else(|| anyhow!("pass --profile or set `profile` in the config"))?;
    let profile = load_profile(&profile_path)?;
    let axis: SweepAxis = args
        .axis
        .or(file.axis)
        .ok_or_else(|| anyhow!("pass --axis or set `axis` in the config"))?
        .parse()?;
    let points = if args.points.is_empty() { file.points.unwrap_or_default() } else { args.points };
    let link = resolve_link(&args.link.or(file.link).unwrap_or_else(|| "wifi".into()))?;
    let load = LoadState {
        sf_client: args.client_slowdown.or(file.client_slowdown).unwrap_or(1.0),
        sf_server: args.server_slowdown.or(file.server_slowdown).unwrap_or(1.0),
    };
    let hard = if args.hard.is_empty() { file.hard } else { args.hard };
    let soft = if args.soft.is_empty() { file.soft } else { args.soft };
    let default_soft = match axis {
        SweepAxis::Deadline => "min:server_cost",
        _ => "max:throughput",
    };
    let spec = SweepSpec {
        axis,
        points,
        link: link.link,
        load,
        slo: slo_or_default(&hard, &soft, default_soft)?,
        pipelined: !args.unpipelined && file.pipelined.unwrap_or(true),
    };
    let live = if args.live {
        let model = ModelPaths::load_optional(&args.model, &args.weights)?
            .ok_or_else(|| anyhow!("--live needs --model and --weights"))?;
        let seed = args.seed.ok_or_else(|| anyhow!("--live needs --seed"))?;
        let inputs = seeded_inputs(model.graph().input_shape(), seed, args.count);
        Some(LiveSpec { model: Arc::new(model), inputs, warmup: args.warmup })
    } else {
        None
    };
    let rows = run_sweep(&profile, &spec, live.as_ref())?;
    match args.out.or(file.output) {
        Some(path) => {
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(axis, &rows, BufWriter::new(f))?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => write_csv(axis, &rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_pack(input: &Path, bitwidth: &str, codec: &str, out: &Path) -> Result<()> {
    let t = read_tensor(input)?;
    let policy = parse_policy(bitwidth, codec)?;
    let packed = pack(0, &t, policy)?;
    let bytes = packed.to_bytes();
    fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    let back = unpack(&packed)?;
    let err = back.max_abs_diff(&t) as f64;
    let bound = match policy.precision {
        Precision::Bits(b) => {
            let (min, max) = t.min_max();
            // Two float roundings on top of the grid spacing.
            error_bound(min, max, b) + 4.0 * f32::EPSILON as f64 * min.abs().max(max.abs()) as f64
        }
        Precision::Passthrough => 0.0,
    };
    let raw = t.len() * 4;
    println!(
        "packed {} floats ({raw} bytes) into {} bytes: ratio {:.2}, codec {}, max error {err:.6e} (bound {bound:.6e})",
        t.len(),
        bytes.len(),
        raw as f64 / bytes.len() as f64,
        packed.codec.name()
    );
    if err > bound {
        bail!("reconstruction error {err:e} exceeds the bound {bound:e}");
    }
    Ok(())
}

fn cmd_unpack(input: &Path, out: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let (packed, used) = PackedTensor::decode(&bytes).with_context(|| format!("decoding {}", input.display()))?;
    if used != bytes.len() {
        bail!("{}: {} trailing bytes after the record", input.display(), bytes.len() - used);
    }
    let t = unpack(&packed).with_context(|| format!("unpacking {}", input.display()))?;
    write_tensor(out, &t)?;
    println!(
        "unpacked {:?} at {} from {} bytes into {}",
        t.shape(),
        packed.precision,
        bytes.len(),
        out.display()
    );
    Ok(())
}
