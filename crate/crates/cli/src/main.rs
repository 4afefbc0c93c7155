use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use exbridge::config::RunConfig;
use exbridge::networks::{ConditionedDenoiser, NetworkWeights};
use exbridge::sampler::{generate_with, InferencePlan};
use exbridge::synthdata::{SynthParams, SyntheticDataset};
use exbridge::tensor::{read_bkt, write_bkt};
use exbridge::training::{run_stage, set_stage, Stage, TrainState};
use exbridge::verify::{self, Suite};
use exbridge::{BridgeSchedule, RngStream, Tensor};

#[derive(Parser)]
#[command(
    name = "exbridge",
    version,
    about = "Exemplar-guided Brownian-bridge diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the bridge schedule and reverse coefficients as CSV.
    Schedule {
        #[arg(long = "T", default_value_t = 200)]
        steps: usize,
        #[arg(long = "s", default_value_t = 1.0)]
        var_scale: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as BKT1 triples with JSON sidecars.
    GenData {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one or both stages and write checkpoints plus a metrics stream.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate an output grid from a control and an exemplar.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        control: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
        /// Inference steps; defaults to the checkpoint's `sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use the EMA shadow weights.
        #[arg(long)]
        ema: bool,
        /// Also write every k-th intermediate state next to `--out`.
        #[arg(long)]
        dump_every: Option<usize>,
    },
    /// Run built-in verification suites and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

/// Failed verification; maps to exit status 3.
#[derive(Debug)]
struct VerificationFailed(usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} verification check(s) failed", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    for cause in err.chain() {
        match cause.downcast_ref::<exbridge::Error>() {
            Some(exbridge::Error::Config(_)) => return 2,
            Some(exbridge::Error::NonFiniteLoss { .. }) => return 4,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Schedule {
            steps,
            var_scale,
            out,
        } => schedule(steps, var_scale, out.as_deref()),
        Command::GenData {
            n,
            grid,
            seed,
            out_dir,
        } => gen_data(n, grid, seed, &out_dir),
        Command::Train {
            config,
            stage,
            resume,
            out_dir,
        } => train(config.as_deref(), stage, resume.as_deref(), out_dir),
        Command::Sample {
            checkpoint,
            control,
            exemplar,
            steps,
            seed,
            out,
            ema,
            dump_every,
        } => sample(
            &checkpoint,
            &control,
            &exemplar,
            steps,
            seed,
            &out,
            ema,
            dump_every,
        ),
        Command::Verify { suite, seed, out } => verify_cmd(&suite, seed, out.as_deref()),
    }
}

fn schedule(steps: usize, var_scale: f64, out: Option<&Path>) -> Result<()> {
    let sched = BridgeSchedule::new(steps, var_scale).map_err(config_error)?;
    match out {
        Some(path) => {
            let mut w = BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            sched.write_csv(&mut w)?;
            w.flush()?;
        }
        None => sched.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

/// Re-labels argument errors from the library as configuration errors.
fn config_error(e: exbridge::Error) -> exbridge::Error {
    match e {
        exbridge::Error::InvalidArgument(m) => exbridge::Error::Config(m),
        other => other,
    }
}

fn gen_data(n: usize, grid: usize, seed: u64, out_dir: &Path) -> Result<()> {
    if !(2..=64).contains(&grid) {
        return Err(exbridge::Error::Config(format!("grid must lie in 2..=64, got {grid}")).into());
    }
    let params = SynthParams::grid(grid);
    let data = SyntheticDataset::new(params, seed, n, 0.1).map_err(config_error)?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    let split_of = |i: usize| {
        if data.val_indices().contains(&i) {
            "val"
        } else {
            "train"
        }
    };
    for i in 0..n {
        let s = data.sample(i);
        let stem = format!("sample_{i:05}");
        let files = [
            ("control", &s.control),
            ("target", &s.target),
            ("exemplar", &s.exemplar),
        ];
        for (kind, t) in files {
            write_bkt(t, out_dir.join(format!("{stem}_{kind}.bkt")))?;
        }
        let sidecar = serde_json::json!({
            "index": i,
            "style": s.style,
            "target_pose": s.target_pose,
            "exemplar_pose": s.exemplar_pose,
        });
        fs::write(
            out_dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        entries.push(serde_json::json!({
            "index": i,
            "split": split_of(i),
            "control": format!("{stem}_control.bkt"),
            "target": format!("{stem}_target.bkt"),
            "exemplar": format!("{stem}_exemplar.bkt"),
            "style": format!("{stem}.json"),
        }));
    }
    let manifest =
        serde_json::json!({ "seed": seed, "grid": grid, "params": params, "samples": entries });
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn save_checkpoint(
    dir: &Path,
    cfg: &RunConfig,
    weights: &NetworkWeights,
    state: &TrainState,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    weights.save(dir, "weights")?;
    state.save(dir)?;
    Ok(())
}

fn train(
    config: Option<&Path>,
    stage: StageArg,
    resume: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match (config, resume) {
        (Some(p), _) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(r)) => RunConfig::load(&r.join("config.txt"))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(dir) = out_dir {
        cfg.out_dir = dir.to_string_lossy().into_owned();
        cfg.validate()?;
    }
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    let net = cfg.network();
    let tc = cfg.train();
    let sched = cfg.schedule()?;
    let data = SyntheticDataset::new(cfg.synth(), cfg.seed, cfg.dataset_size, cfg.val_fraction)?;

    let (mut weights, mut state) = match resume {
        Some(dir) => (
            NetworkWeights::load(dir, "weights")?,
            TrainState::load(dir)?,
        ),
        None => {
            let w = NetworkWeights::init(&net, &mut RngStream::named(cfg.seed, "init"))?;
            let s = TrainState::new(&tc, &w, cfg.seed)?;
            (w, s)
        }
    };
    if stage == StageArg::Two && state.stage == Stage::Stage1 && resume.is_none() {
        bail!(exbridge::Error::StageTransition(
            "--stage 2 needs --resume with a Stage 1 checkpoint".into()
        ));
    }

    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("metrics.jsonl"))?,
    );
    let mut sink =
        |rec: &exbridge::training::StepRecord, val: Option<f64>| -> exbridge::Result<()> {
            let mut line = serde_json::to_value(rec)?;
            if let Some(v) = val {
                line["val_loss"] = v.into();
            }
            writeln!(metrics, "{line}")?;
            Ok(())
        };

    if matches!(stage, StageArg::One | StageArg::All) && state.stage == Stage::Stage1 {
        let todo = cfg.stage1_steps.saturating_sub(state.step);
        run_stage(
            &mut state,
            &mut weights,
            &net,
            &sched,
            &tc,
            &data,
            todo,
            &mut sink,
        )?;
        save_checkpoint(&out.join("stage1"), &cfg, &weights, &state)?;
    }
    if matches!(stage, StageArg::Two | StageArg::All) {
        set_stage(&mut state, &mut weights, Stage::Stage2)?;
        let todo = cfg.stage2_steps.saturating_sub(state.stage_step);
        run_stage(
            &mut state,
            &mut weights,
            &net,
            &sched,
            &tc,
            &data,
            todo,
            &mut sink,
        )?;
        save_checkpoint(&out.join("stage2"), &cfg, &weights, &state)?;
    }
    metrics.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    checkpoint: &Path,
    control: &Path,
    exemplar: &Path,
    steps: Option<usize>,
    seed: u64,
    out: &Path,
    ema: bool,
    dump_every: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(&checkpoint.join("config.txt"))?;
    let net = cfg.network();
    let sched = cfg.schedule()?;
    let plan = InferencePlan::new(cfg.timesteps, steps.unwrap_or(cfg.sample_steps))
        .map_err(config_error)?;
    let state = TrainState::load(checkpoint)?;
    let weights = if ema {
        state.ema.clone()
    } else {
        NetworkWeights::load(checkpoint, "weights")?
    };
    let y = read_bkt(control)?;
    let z = read_bkt(exemplar)?;
    let model = ConditionedDenoiser::new(&weights, &net, &z, state.stage == Stage::Stage2)?;

    let mut rng = RngStream::named(seed, "sample");
    let shape = y.shape().to_vec();
    let mut dumps: Vec<(usize, Tensor)> = Vec::new();
    let mut hop = 0usize;
    let result = generate_with(
        &sched,
        &plan,
        &model,
        &y,
        &mut |_| Tensor::randn(&shape, &mut rng),
        &mut |t, x| {
            hop += 1;
            if let Some(k) = dump_every {
                if k > 0 && hop.is_multiple_of(k) && t > 0 {
                    dumps.push((t, x.clone()));
                }
            }
        },
    )?;
    write_bkt(&result, out)?;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for (t, x) in dumps {
        write_bkt(&x, out.with_file_name(format!("{stem}_t{t:04}.bkt")))?;
    }
    Ok(())
}

fn verify_cmd(suite: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let suite: Suite = suite.parse().map_err(config_error)?;
    let report = verify::run(suite, seed)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    if report.failures > 0 {
        return Err(VerificationFailed(report.failures).into());
    }
    Ok(())
}
