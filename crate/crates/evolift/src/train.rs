//! The training loop, the sliding-window evaluator, and whole-sequence
//! inference. Optimization runs single-threaded and fully seeded so a run
//! is reproducible bit for bit; evaluation and inference fan work out
//! across a thread pool and merge results in sequence order, which keeps
//! them deterministic too.

use std::path::Path;

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::DropoutState;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::kinematics::dataset::read_dataset;
use crate::kinematics::{flip_horizontal, normalize_2d, SequenceRecord, Skeleton};
use crate::loss::{sequence_parts, total_loss};
use crate::metrics::{joint_errors, EvalReport};
use crate::model::{ForwardOptions, PoseLifter};
use crate::optim::{amsgrad_step, lr_schedule, OptState};
use crate::tensor::Tape;

/// Which frames of each sequence get scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// One prediction per valid window position (offsets `0..=T-N`), each
    /// scoring only its center frame. Sequences shorter than the window
    /// collapse to a single replication-padded window.
    CenterOnly,
    /// Every frame becomes a window center (edges replication-padded), so
    /// the whole sequence is scored.
    AllFrames,
}

/// One line of the training log: the epoch's mean training loss and the
/// held-out evaluation that followed it.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// False when any sample lacked camera intrinsics or a root trajectory,
    /// i.e. the reprojection term was (partly) skipped.
    pub reproj_active: bool,
    pub eval: EvalReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub model: PoseLifter,
    pub opt: OptState,
}

/// Worker pool for evaluation and inference, capped by `EVOLIFT_THREADS`.
fn worker_pool() -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("EVOLIFT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .with_context(|| format!("EVOLIFT_THREADS must be a positive integer, got {v:?}"))?;
        builder = builder.num_threads(n);
    }
    builder.build().context("building the worker pool")
}

/// Loads a JSONL dataset and rejects records that do not fit the skeleton.
pub fn load_records(path: &Path, skeleton: &Skeleton) -> anyhow::Result<Vec<SequenceRecord>> {
    let records =
        read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if records.is_empty() {
        bail!("dataset {} holds no records", path.display());
    }
    for (i, rec) in records.iter().enumerate() {
        rec.validate(i)?;
        if rec.joints != skeleton.joint_count() {
            bail!(
                "record {i} in {} has {} joints but the model skeleton has {}",
                path.display(),
                rec.joints,
                skeleton.joint_count()
            );
        }
    }
    Ok(records)
}

/// Frame indices of the window centered on `t`, clamped to the sequence so
/// edge windows replicate their boundary frame.
fn window_indices(t: isize, window: usize, t_len: usize) -> Vec<usize> {
    let half = (window as isize - 1) / 2;
    (0..window as isize)
        .map(|k| (t - half + k).clamp(0, t_len as isize - 1) as usize)
        .collect()
}

/// Normalized model input for the given source frames.
fn window_input(tape: &mut Tape, rec: &SequenceRecord, frames: &[usize]) -> crate::tensor::Tensor {
    let j = rec.joints;
    let mut raw = Vec::with_capacity(frames.len() * j * 2);
    for &src in frames {
        raw.extend_from_slice(rec.pose2d_frame(src));
    }
    let norm = normalize_2d(&raw, rec.camera.as_ref());
    tape.constant(norm, &[frames.len(), j, 2])
}

/// Shifts a predicted frame so its root joint sits at the origin, matching
/// the root-relative ground truth.
fn root_center(frame: &[f64], root: usize) -> Vec<f64> {
    let r = [frame[root * 3], frame[root * 3 + 1], frame[root * 3 + 2]];
    frame
        .iter()
        .enumerate()
        .map(|(i, v)| v - r[i % 3])
        .collect()
}

fn root_joint(skeleton: &Skeleton) -> usize {
    skeleton
        .parent
        .iter()
        .position(|p| *p == -1)
        .expect("a valid skeleton has a root")
}

/// Frames scored for a sequence of length `t_len` under the given mode.
fn scored_frames(mode: EvalMode, window: usize, t_len: usize) -> Vec<usize> {
    let half = (window - 1) / 2;
    match mode {
        EvalMode::AllFrames => (0..t_len).collect(),
        EvalMode::CenterOnly if t_len >= window => (half..t_len - half).collect(),
        // Shorter than one window: replication padding turns the whole
        // sequence into a single window with the middle frame as center.
        EvalMode::CenterOnly => vec![(t_len - 1) / 2],
    }
}

/// Per-joint errors of one sequence's scored frames. `model` of `None`
/// scores the ground truth against itself, which calibrates the metric
/// pipeline (everything must come out perfect).
fn score_sequence(
    model: Option<(&PoseLifter, ForwardOptions)>,
    window: usize,
    rec: &SequenceRecord,
    root: usize,
    mode: EvalMode,
) -> (usize, Vec<f64>) {
    let half = (window - 1) / 2;
    let frames = scored_frames(mode, window, rec.n_frames);
    let mut errors = Vec::with_capacity(frames.len() * rec.joints);
    for &t in &frames {
        let pred = match model {
            None => rec.pose3d_frame(t).to_vec(),
            Some((m, fwd)) => {
                let mut tape = Tape::new();
                let idx = window_indices(t as isize, window, rec.n_frames);
                let input = window_input(&mut tape, rec, &idx);
                let out = m.forward(&mut tape, input, fwd, None);
                tape.data(out)[half * rec.joints * 3..(half + 1) * rec.joints * 3].to_vec()
            }
        };
        let pred = root_center(&pred, root);
        errors.extend(joint_errors(&pred, rec.pose3d_frame(t)));
    }
    (frames.len(), errors)
}

/// Sliding-window evaluation over a dataset. Sequences are scored in
/// parallel and merged in order, so the report does not depend on the
/// worker count.
pub fn evaluate(
    model: Option<(&PoseLifter, ForwardOptions)>,
    window: usize,
    records: &[SequenceRecord],
    skeleton: &Skeleton,
    mode: EvalMode,
) -> anyhow::Result<EvalReport> {
    if records.is_empty() {
        bail!("evaluation dataset is empty");
    }
    for (i, rec) in records.iter().enumerate() {
        if rec.joints != skeleton.joint_count() {
            bail!(
                "record {i} has {} joints but the model was built for {}",
                rec.joints,
                skeleton.joint_count()
            );
        }
    }
    let root = root_joint(skeleton);
    let pool = worker_pool()?;
    let per_sequence: Vec<(usize, usize, Vec<f64>)> = pool.install(|| {
        use rayon::prelude::*;
        records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let (frames, errors) = score_sequence(model, window, rec, root, mode);
                (i, frames, errors)
            })
            .collect()
    });
    Ok(EvalReport::from_joint_errors(&per_sequence))
}

/// Root-relative predictions for every frame of each sequence.
#[derive(Debug, Clone, Serialize)]
pub struct InferOutput {
    pub index: usize,
    pub frames: usize,
    pub joints: usize,
    /// Row-major frames x joints x 3, millimeters, root at the origin.
    pub pose3d: Vec<f64>,
}

pub fn infer(
    model: &PoseLifter,
    fwd: ForwardOptions,
    window: usize,
    records: &[SequenceRecord],
) -> anyhow::Result<Vec<InferOutput>> {
    let root = root_joint(&model.skeleton);
    let half = (window - 1) / 2;
    for (i, rec) in records.iter().enumerate() {
        if rec.joints != model.skeleton.joint_count() {
            bail!("record {i} has {} joints, model expects {}", rec.joints, model.joints());
        }
    }
    let pool = worker_pool()?;
    Ok(pool.install(|| {
        use rayon::prelude::*;
        records
            .par_iter()
            .enumerate()
            .map(|(index, rec)| {
                let j = rec.joints;
                let mut pose3d = Vec::with_capacity(rec.n_frames * j * 3);
                for t in 0..rec.n_frames {
                    let mut tape = Tape::new();
                    let idx = window_indices(t as isize, window, rec.n_frames);
                    let input = window_input(&mut tape, rec, &idx);
                    let out = model.forward(&mut tape, input, fwd, None);
                    let frame = &tape.data(out)[half * j * 3..(half + 1) * j * 3];
                    pose3d.extend(root_center(frame, root));
                }
                InferOutput { index, frames: rec.n_frames, joints: j, pose3d }
            })
            .collect()
    }))
}

/// Runs the full training schedule for the configured skeleton, feeding one
/// [`EpochLog`] per epoch into `sink` and checkpointing after every epoch.
/// With `resume`, picks the run up from the checkpoint file exactly where
/// it stopped: the result is bit-identical to never having stopped.
pub fn train_with_skeleton(
    cfg: &TrainConfig,
    skeleton: &Skeleton,
    resume: bool,
    mut sink: impl FnMut(&EpochLog),
) -> anyhow::Result<TrainOutcome> {
    cfg.validate().map_err(anyhow::Error::msg)?;
    let records = load_records(&cfg.train_data, skeleton)?;
    for (i, rec) in records.iter().enumerate() {
        if rec.n_frames != cfg.n_frames {
            bail!(
                "training record {i} has {} frames but the configured window is {} \
                 (training consumes whole sequences)",
                rec.n_frames,
                cfg.n_frames
            );
        }
    }
    let eval_records = match &cfg.eval_data {
        Some(path) => load_records(path, skeleton)?,
        None => records.clone(),
    };

    let mut model = PoseLifter::init(skeleton.clone(), &cfg.model_dims(), cfg.seed);
    let mut opt = OptState::new(&model.ps);
    // Offset keeps the data-order stream independent of the weight-init
    // stream, which also consumes the raw seed.
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut start_epoch = 0usize;

    if resume {
        let ck = Checkpoint::load(&cfg.checkpoint)?;
        let stored = ck.config()?;
        if stored.model_dims() != cfg.model_dims() {
            bail!(
                "checkpoint was trained with different model dimensions; \
                 refusing to resume into an incompatible architecture"
            );
        }
        ck.restore_params(&mut model.ps)?;
        opt = ck.restore_opt(&model.ps)?;
        master = ck.rng();
        start_epoch = ck.epoch as usize;
        if start_epoch >= cfg.epochs {
            bail!(
                "checkpoint already covers {} epochs; raise epochs (now {}) to continue",
                start_epoch,
                cfg.epochs
            );
        }
    }

    let fwd = ForwardOptions { use_spr: cfg.use_spr, use_recursion: cfg.use_recursion };
    let mut logs = Vec::with_capacity(cfg.epochs - start_epoch);
    let param_count = model.ps.len();
    let refs: Vec<_> = model.ps.refs().collect();

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr0);
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut master);

        let mut epoch_loss = 0.0;
        let mut reproj_samples = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vec![Vec::new(); param_count];
            for r in &refs {
                grads[r.index()] = vec![0.0; model.ps.data(*r).len()];
            }
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let flipped;
                let rec = if cfg.flip_augment && master.gen_bool(0.5) {
                    flipped = flip_horizontal(&records[idx], skeleton);
                    &flipped
                } else {
                    &records[idx]
                };
                let mut drop_state = (cfg.dropout > 0.0).then(|| DropoutState {
                    rate: cfg.dropout,
                    rng: ChaCha8Rng::seed_from_u64(master.next_u64()),
                });

                let mut tape = Tape::new();
                let frames: Vec<usize> = (0..rec.n_frames).collect();
                let input = window_input(&mut tape, rec, &frames);
                let out = model.forward(&mut tape, input, fwd, drop_state.as_mut());
                let gt3d = tape.constant(rec.pose3d.clone(), &[rec.n_frames, rec.joints, 3]);
                let gt2d = tape.constant(rec.pose2d.clone(), &[rec.n_frames, rec.joints, 2]);
                let parts = sequence_parts(
                    &mut tape,
                    out,
                    gt3d,
                    gt2d,
                    rec.camera.as_ref(),
                    rec.root_abs.as_deref(),
                    cfg.squared_coord_loss,
                );
                reproj_samples += parts.reproj.is_some() as usize;
                let loss = total_loss(&mut tape, &parts, &cfg.loss);
                epoch_loss += tape.value(loss);
                tape.backward(loss);
                for r in &refs {
                    if let Some(g) = tape.param_grad(*r) {
                        let acc = &mut grads[r.index()];
                        for (a, gi) in acc.iter_mut().zip(g) {
                            *a += gi * scale;
                        }
                    }
                }
            }
            amsgrad_step(&mut model.ps, &grads, &mut opt, lr);
        }

        let eval = evaluate(
            Some((&model, fwd)),
            cfg.n_frames,
            &eval_records,
            skeleton,
            EvalMode::CenterOnly,
        )?;
        Checkpoint::capture(cfg, &model.ps, &opt, (epoch + 1) as u64, &master)
            .save(&cfg.checkpoint)?;
        let log = EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / records.len() as f64,
            reproj_active: reproj_samples == records.len(),
            eval,
        };
        sink(&log);
        logs.push(log);
    }

    Ok(TrainOutcome { logs, model, opt })
}

/// [`train_with_skeleton`] on the standard 17-joint layout the data
/// generator emits. Dataset files carry no tree structure, so the trainer
/// pins the skeleton rather than guessing one from joint counts.
pub fn train(cfg: &TrainConfig, resume: bool, sink: impl FnMut(&EpochLog)) -> anyhow::Result<TrainOutcome> {
    train_with_skeleton(cfg, &Skeleton::h36m17(), resume, sink)
}

/// Rebuilds the trained model (17-joint layout) from a checkpoint file.
pub fn load_model(path: &Path) -> anyhow::Result<(PoseLifter, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config()?;
    let mut model = PoseLifter::init(Skeleton::h36m17(), &cfg.model_dims(), cfg.seed);
    ck.restore_params(&mut model.ps)?;
    Ok((model, cfg))
}
