//! Command-line entry point: synthetic data generation, training,
//! evaluation, inference, and a finite-difference gradient audit. Every
//! command reports results as JSON lines on stdout; failures print one
//! machine-readable `{"error": ...}` line on stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use evolift::blocks::{embed_sequence, ste_stack, StevoDims};
use evolift::config::TrainConfig;
use evolift::kinematics::dataset::write_dataset;
use evolift::kinematics::{generate_sequence, MotionParams, SequenceRecord, Skeleton};
use evolift::model::{ForwardOptions, ModelDims, PoseLifter};
use evolift::refine::{refine_schedule, RefineParams};
use evolift::structural::structural_features;
use evolift::tensor::grad_check_params;
use evolift::train::{evaluate, infer, load_model, load_records, train, EvalMode};

#[derive(Parser)]
#[command(
    name = "evolift",
    version,
    about = "Train and evaluate a 2D-to-3D pose lifting model on synthetic motion data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    /// 17-joint body with mirrored limbs.
    H36m17,
    /// 17-joint unbranched chain (no body structure).
    Chain17,
}

impl Layout {
    fn skeleton(self) -> Skeleton {
        match self {
            Layout::H36m17 => Skeleton::h36m17(),
            Layout::Chain17 => Skeleton::chain(17, 100.0),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckProfile {
    /// One block, seconds.
    Quick,
    /// Two blocks and two refinement rounds, the full audit.
    Standard,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic dataset (JSONL, one sequence per line).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Sequences to generate.
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Frames per sequence (odd).
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Layout::H36m17)]
        skeleton: Layout,
        /// Motion amplitude scale; 0 freezes every pose.
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
    },
    /// Train a model; flags override keys from the config file.
    Train {
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint file instead of starting fresh.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        n_frames: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        flip_augment: Option<bool>,
        #[arg(long)]
        use_spr: Option<bool>,
        #[arg(long)]
        use_recursion: Option<bool>,
        #[arg(long)]
        squared_coord_loss: Option<bool>,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "use_ground_truth")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score every frame instead of valid window centers only.
        #[arg(long)]
        all_frames: bool,
        /// Feed ground-truth 3D as the prediction: a pipeline self-check
        /// that must come out perfect.
        #[arg(long)]
        use_ground_truth: bool,
        /// Window length for --use-ground-truth runs (checkpoints carry
        /// their own).
        #[arg(long, default_value_t = 9)]
        window: usize,
    },
    /// Write root-relative 3D predictions for whole sequences.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSONL path, one sequence per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit analytic gradients of the assembled model against central
    /// differences.
    GradCheck {
        #[arg(long, value_enum, default_value_t = CheckProfile::Standard)]
        profile: CheckProfile,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", json!({ "error": format!("{err:#}") }));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData { out, count, frames, seed, skeleton, amplitude } => {
            gen_data(&out, count, frames, seed, skeleton, amplitude)
        }
        Cmd::Train {
            config,
            resume,
            epochs,
            seed,
            lr0,
            batch_size,
            n_frames,
            dropout,
            flip_augment,
            use_spr,
            use_recursion,
            squared_coord_loss,
            train_data,
            eval_data,
            checkpoint,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            macro_rules! set {
                ($($field:ident),*) => {
                    $(if let Some(v) = $field { cfg.$field = v; })*
                };
            }
            set!(epochs, seed, lr0, batch_size, n_frames, dropout);
            set!(flip_augment, use_spr, use_recursion, squared_coord_loss);
            set!(train_data, checkpoint);
            if let Some(path) = eval_data {
                cfg.eval_data = Some(path);
            }
            cfg.validate().map_err(anyhow::Error::msg)?;
            run_train(&cfg, resume)
        }
        Cmd::Eval { checkpoint, data, all_frames, use_ground_truth, window } => {
            run_eval(checkpoint.as_deref(), &data, all_frames, use_ground_truth, window)
        }
        Cmd::Infer { checkpoint, data, out } => run_infer(&checkpoint, &data, &out),
        Cmd::GradCheck { profile } => run_grad_check(profile),
    }
}

fn gen_data(
    out: &Path,
    count: usize,
    frames: usize,
    seed: u64,
    layout: Layout,
    amplitude: f64,
) -> anyhow::Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    if frames == 0 || frames % 2 == 0 {
        bail!("--frames must be odd and positive, got {frames}");
    }
    if !amplitude.is_finite() || amplitude < 0.0 {
        bail!("--amplitude must be finite and nonnegative, got {amplitude}");
    }
    let skeleton = layout.skeleton();
    let motion = MotionParams { amplitude, ..MotionParams::default() };
    let records: Vec<SequenceRecord> = (0..count)
        .map(|i| generate_sequence(&skeleton, frames, seed.wrapping_add(i as u64), &motion))
        .collect();
    write_dataset(&records, out)?;
    println!(
        "{}",
        json!({ "out": out, "records": count, "frames": frames, "joints": skeleton.joint_count() })
    );
    Ok(())
}

fn run_train(cfg: &TrainConfig, resume: bool) -> anyhow::Result<()> {
    let outcome = train(cfg, resume, |log| {
        println!("{}", serde_json::to_string(log).expect("epoch log serializes"));
    })?;
    let last = outcome.logs.last().context("training produced no epochs")?;
    println!(
        "{}",
        json!({
            "checkpoint": cfg.checkpoint,
            "epochs": cfg.epochs,
            "final_train_loss": last.train_loss,
            "final_mpjpe_mm": last.eval.mpjpe_mm,
        })
    );
    Ok(())
}

fn run_eval(
    checkpoint: Option<&Path>,
    data: &Path,
    all_frames: bool,
    use_ground_truth: bool,
    window: usize,
) -> anyhow::Result<()> {
    let mode = if all_frames { EvalMode::AllFrames } else { EvalMode::CenterOnly };
    let report = if use_ground_truth {
        // Metrics only need the joint count and a root; pick a layout that
        // matches the data so any valid dataset can be self-checked.
        let probe = evolift::kinematics::dataset::read_dataset(data)
            .with_context(|| format!("reading dataset {}", data.display()))?;
        let joints = probe.first().context("dataset holds no records")?.joints;
        let skeleton =
            if joints == 17 { Skeleton::h36m17() } else { Skeleton::chain(joints.max(2), 100.0) };
        let records = load_records(data, &skeleton)?;
        evaluate(None, window, &records, &skeleton, mode)?
    } else {
        let path = checkpoint.expect("clap enforces --checkpoint unless --use-ground-truth");
        let (model, cfg) = load_model(path)?;
        let records = load_records(data, &model.skeleton)?;
        let fwd = ForwardOptions { use_spr: cfg.use_spr, use_recursion: cfg.use_recursion };
        evaluate(Some((&model, fwd)), cfg.n_frames, &records, &model.skeleton, mode)?
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_infer(checkpoint: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let (model, cfg) = load_model(checkpoint)?;
    let records = load_records(data, &model.skeleton)?;
    let fwd = ForwardOptions { use_spr: cfg.use_spr, use_recursion: cfg.use_recursion };
    let outputs = infer(&model, fwd, cfg.n_frames, &records)?;
    let mut lines = String::new();
    for o in &outputs {
        lines.push_str(&serde_json::to_string(o)?);
        lines.push('\n');
    }
    std::fs::write(out, lines).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", json!({ "out": out, "sequences": outputs.len() }));
    Ok(())
}

/// Five joints, two mirrored chains: the smallest skeleton that exercises
/// bone, gap, and mirror pair features.
fn audit_skeleton() -> Skeleton {
    let u = [0.0, 1.0, 0.0];
    Skeleton::new(
        vec![-1, 0, 1, 0, 3],
        vec![(1, 3), (2, 4)],
        vec![0.0, 100.0, 120.0, 100.0, 120.0],
        vec![u; 5],
    )
    .expect("audit skeleton is valid")
}

fn run_grad_check(profile: CheckProfile) -> anyhow::Result<()> {
    let (name, blocks) = match profile {
        CheckProfile::Quick => ("quick", 1),
        CheckProfile::Standard => ("standard", 2),
    };
    let (n, j) = (5usize, 5usize);
    let dims = ModelDims {
        stevo: StevoDims { blocks, heads: 2, d_s: 8, d_p: 4, d_o: 2, n_max: n },
        rounds: 2,
    };
    let model = PoseLifter::init(audit_skeleton(), &dims, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    // Inputs bounded away from zero keep every layer norm well conditioned
    // for the finite-difference probes.
    let x_data: Vec<f64> = (0..n * j * 2)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.4..1.0)
        })
        .collect();
    let start = std::time::Instant::now();
    let (err, worst) = grad_check_params(
        &model.ps,
        |tape, ps| {
            // Rebuild the forward pass against the probed parameter set;
            // the model's bundles are plain references valid for any set
            // with the same layout.
            let x = tape.constant(x_data.clone(), &[n, j, 2]);
            let s = embed_sequence(tape, ps, x, &model.stevo.embed);
            let pair = structural_features(tape, ps, &model.joint_map, &model.spr);
            let (se, pe) = ste_stack(tape, ps, s, pair, &model.stevo, None);
            let rounds: Vec<&RefineParams> =
                std::iter::repeat(&model.refine).take(model.dims.rounds).collect();
            let (out, _) = refine_schedule(tape, ps, se, pe, &rounds, true, None);
            // Probe the mean squared output in meters so typical gradient
            // entries sit near unit scale.
            let m = tape.scale(out, 1e-3);
            let sq = tape.mul(m, m);
            tape.mean_all(sq)
        },
        1e-4,
    );
    let pass = err < 1e-5;
    let line = json!({
        "profile": name,
        "max_rel_err": err,
        "worst_param": worst,
        "threshold": 1e-5,
        "seconds": start.elapsed().as_secs_f64(),
        "pass": pass,
    });
    if !pass {
        bail!("gradient check failed: {line}");
    }
    println!("{line}");
    Ok(())
}
