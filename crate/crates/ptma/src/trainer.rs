//! Training: window sampling, gradient accumulation, Adam with cosine
//! annealing, early stopping on validation mAP, and checkpoint files.
//!
//! Each epoch draws `ceil(K / T)` windows per video at uniformly random
//! starts (a fixed-stride grid is available for reproducibility studies),
//! pools and shuffles them, and averages gradients over each batch. All
//! randomness is drawn sequentially from per-purpose streams before any
//! parallel section, and gradients reduce in window order, so a run is
//! reproducible for any thread count.
//!
//! # Checkpoint format
//!
//! Little-endian binary:
//!
//! ```text
//! magic    8 bytes "PTMACKPT"
//! version  u32     1
//! config   7 x u32 (input, embed, latent, actions, window, enc, dec)
//!          u8      alpha-present flag, then f64 alpha if present
//!          u32     mode (0..=4)
//! params   u32     parameter count, then per tensor:
//!          u32     name length, name bytes,
//!          u32     rank, u32 extents[rank], f32 data
//! ```

use crate::dataio::FeatureSequence;
use crate::error::{PtmaError, Result};
use crate::evalproto::{evaluate_run, DetectionRun, Metric, VideoRun};
use crate::model::{
    forward_window, forward_window_bound, BoundParams, Mode, ModelConfig, ModelParams,
};
use crate::numerics::gradcheck::{grad_check, GradCheckReport};
use crate::numerics::tape::ParamGrads;
use crate::numerics::tensor::{real, Scalar, Tensor};
use crate::numerics::Tape;
use crate::objectives::{window_objective, LossBreakdown, LossWeights};
use crate::rng::{Rng, StreamKind};
use crate::stream::batch_infer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; cosine-annealed to zero over the run.
    pub lr0: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub normalize_cls: bool,
    /// Sample windows on a fixed grid instead of random starts.
    pub fixed_stride: bool,
    /// Truncate reconstruction pairs to the shorter video instead of
    /// erroring on length mismatch.
    pub truncate_pairs: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr0: 1.4e-4,
            weights: LossWeights::default(),
            seed: 0,
            patience: 3,
            normalize_cls: false,
            fixed_stride: false,
            truncate_pairs: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PtmaError::config("epochs and batch size must be >= 1"));
        }
        if self.lr0 <= 0.0 {
            return Err(PtmaError::config("learning rate must be > 0"));
        }
        self.weights.validate()
    }
}

/// A training video plus its frame-synchronized reconstruction partner when
/// the split pairs views.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub seq: FeatureSequence,
    pub recon: Option<FeatureSequence>,
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moments, one pair of tensors per parameter in canonical order.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One Adam update: bias-corrected moments, then
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) {
    state.step += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, ((name, theta), (gname, grad))) in params
        .named_mut()
        .into_iter()
        .zip(grads.iter())
        .enumerate()
    {
        assert_eq!(name, gname, "gradient order must match parameter order");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut new_theta = Vec::with_capacity(theta.numel());
        let mut new_m = Vec::with_capacity(theta.numel());
        let mut new_v = Vec::with_capacity(theta.numel());
        for ((&t, &g), (&mi, &vi)) in theta
            .data()
            .iter()
            .zip(grad.data())
            .zip(m.data().iter().zip(v.data()))
        {
            let g = g.to_f64();
            let mi = b1 * mi.to_f64() + (1.0 - b1) * g;
            let vi = b2 * vi.to_f64() + (1.0 - b2) * g * g;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let t = t.to_f64() - lr * m_hat / (v_hat.sqrt() + state.eps);
            new_theta.push(real::<T>(t));
            new_m.push(real::<T>(mi));
            new_v.push(real::<T>(vi));
        }
        *theta = Tensor::new(theta.shape().to_vec(), new_theta).expect("same shape");
        *m = Tensor::new(m.shape().to_vec(), new_m).expect("same shape");
        *v = Tensor::new(v.shape().to_vec(), new_v).expect("same shape");
    }
}

/// Cosine annealing from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

// ---------------------------------------------------------------------------
// Window sampling
// ---------------------------------------------------------------------------

/// A window's placement in its video: `start` and the count of left-pad
/// frames (nonzero only when the video is shorter than the window).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub start: usize,
    pub pad: usize,
}

/// `ceil(K / T)` windows with uniformly random starts in `[0, K - T]`; a
/// video shorter than the window yields one left-padded window. With
/// `fixed_stride` the starts fall on a grid instead (last one clamped).
pub fn sample_windows(
    frames: usize,
    window: usize,
    rng: &mut Rng,
    fixed_stride: bool,
) -> Vec<WindowSpec> {
    if frames <= window {
        return vec![WindowSpec {
            start: 0,
            pad: window - frames,
        }];
    }
    let count = frames.div_ceil(window);
    (0..count)
        .map(|i| WindowSpec {
            start: if fixed_stride {
                (i * window).min(frames - window)
            } else {
                rng.int_range(0, frames - window)
            },
            pad: 0,
        })
        .collect()
}

/// Materialized training window: padded features, labels, validity flags,
/// and the reconstruction target (same rows of the partner view, or of the
/// input itself).
struct Window {
    features: Tensor<f32>,
    target: Tensor<f32>,
    labels: Vec<u16>,
    valid: Vec<bool>,
}

fn pad_rows(src: &Tensor<f32>, start: usize, take: usize, pad: usize, window: usize) -> Tensor<f32> {
    let d = src.cols();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(window);
    for _ in 0..pad {
        rows.push(vec![0.0; d]);
    }
    for t in 0..take {
        rows.push(src.row(start + t).to_vec());
    }
    Tensor::from_rows(&rows).expect("window rows")
}

fn materialize(item: &TrainItem, spec: WindowSpec, window: usize, frames: usize) -> Window {
    let take = window - spec.pad;
    let features = pad_rows(&item.seq.features, spec.start, take, spec.pad, window);
    let target_src = item.recon.as_ref().map(|r| &r.features).unwrap_or(&item.seq.features);
    let target = pad_rows(target_src, spec.start, take, spec.pad, window);
    let mut labels = vec![0u16; spec.pad];
    let mut valid = vec![false; spec.pad];
    labels.extend_from_slice(&item.seq.labels[spec.start..spec.start + take]);
    valid.extend(std::iter::repeat(true).take(take));
    debug_assert!(spec.start + take <= frames);
    Window {
        features,
        target,
        labels,
        valid,
    }
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_rec: f64,
    pub l_kld: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_rec: f64,
    pub l_kld: f64,
    pub total: f64,
    pub val_map: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Per-step loss curve: `step,lr,L_cls,L_rec,L_kld,total`.
    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let to_io = |e: std::io::Error| PtmaError::io(path.display().to_string(), e);
        let mut f = std::fs::File::create(path).map_err(to_io)?;
        writeln!(f, "step,lr,L_cls,L_rec,L_kld,total").map_err(to_io)?;
        for s in &self.steps {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                s.step, s.lr, s.l_cls, s.l_rec, s.l_kld, s.total
            )
            .map_err(to_io)?;
        }
        Ok(())
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let to_io = |e: std::io::Error| PtmaError::io(path.display().to_string(), e);
        let mut f = std::fs::File::create(path).map_err(to_io)?;
        writeln!(f, "epoch,L_cls,L_rec,L_kld,total,val_mAP,best").map_err(to_io)?;
        for e in &self.epochs {
            let val = e.val_map.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                e.epoch, e.l_cls, e.l_rec, e.l_kld, e.total, val, e.best
            )
            .map_err(to_io)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_map: Option<f64>,
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn check_items(items: &[TrainItem], mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Vec<TrainItem>> {
    if items.is_empty() {
        return Err(PtmaError::data("no training videos"));
    }
    let mut prepared = Vec::with_capacity(items.len());
    for item in items {
        item.seq.validate()?;
        if item.seq.feature_dim() != mcfg.input_dim {
            return Err(PtmaError::data(format!(
                "video {}: feature dim {} vs model input dim {}",
                item.seq.video_id,
                item.seq.feature_dim(),
                mcfg.input_dim
            )));
        }
        if item.seq.class_count != mcfg.num_actions {
            return Err(PtmaError::data(format!(
                "video {}: {} action classes vs model's {}",
                item.seq.video_id, item.seq.class_count, mcfg.num_actions
            )));
        }
        let mut item = item.clone();
        if let Some(recon) = item.recon.as_mut() {
            if recon.feature_dim() != mcfg.input_dim {
                return Err(PtmaError::data(format!(
                    "partner of {}: feature dim {} vs model input dim {}",
                    item.seq.video_id,
                    recon.feature_dim(),
                    mcfg.input_dim
                )));
            }
            if recon.frames() != item.seq.frames() {
                if !tcfg.truncate_pairs {
                    return Err(PtmaError::data(format!(
                        "video {}: paired views have {} vs {} frames (pass --truncate-pairs to clip)",
                        item.seq.video_id,
                        item.seq.frames(),
                        recon.frames()
                    )));
                }
                let k = item.seq.frames().min(recon.frames());
                item.seq.features =
                    crate::numerics::tensor::slice_rows(&item.seq.features, 0, k)?;
                item.seq.labels.truncate(k);
                recon.features = crate::numerics::tensor::slice_rows(&recon.features, 0, k)?;
                recon.labels.truncate(k);
            }
        }
        prepared.push(item);
    }
    Ok(prepared)
}

fn eval_window(
    params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    w: &Window,
    eps: Option<&Tensor<f32>>,
) -> Result<(ParamGrads<f32>, LossBreakdown)> {
    let mut tape = Tape::new();
    let trace = forward_window(&mut tape, params, mcfg, &w.features, eps)?;
    let (total, breakdown) = window_objective(
        &mut tape,
        &trace,
        mcfg.mode,
        &w.labels,
        &w.valid,
        &w.target,
        &tcfg.weights,
        tcfg.normalize_cls,
    )?;
    if !breakdown.total.is_finite() {
        return Err(PtmaError::numeric(format!(
            "training loss diverged: {:?}",
            breakdown
        )));
    }
    let grads = tape.backward(total)?;
    Ok((grads, breakdown))
}

/// Validation mAP (plain, background excluded) used for early stopping.
fn validation_map(
    params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    val: &[FeatureSequence],
) -> Result<f64> {
    let videos: Result<Vec<VideoRun>> = val
        .par_iter()
        .map(|seq| {
            let scores = batch_infer(params, mcfg, &seq.features)?;
            Ok(VideoRun {
                video_id: seq.video_id.clone(),
                view_id: seq.view_id,
                scores,
                labels: seq.labels.clone(),
            })
        })
        .collect();
    let run = DetectionRun {
        protocol: "val".into(),
        class_count: mcfg.num_actions,
        videos: videos?,
    };
    Ok(evaluate_run(&run, Metric::MAp)?.mean_ap)
}

/// Runs the full training loop and returns the best parameters by
/// validation mAP (the final ones when no validation set exists).
pub fn train_run(
    items: &[TrainItem],
    val: &[FeatureSequence],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    let items = check_items(items, mcfg, tcfg)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tcfg.threads.max(1))
        .build()
        .map_err(|e| PtmaError::config(format!("thread pool: {e}")))?;

    let mut init_rng = Rng::stream(tcfg.seed, StreamKind::Init);
    let mut params = ModelParams::<f32>::init(mcfg, &mut init_rng);
    let mut opt = OptimizerState::new(&params);

    let windows_per_epoch: usize = items
        .iter()
        .map(|i| i.seq.frames().div_ceil(mcfg.window))
        .sum();
    let steps_per_epoch = windows_per_epoch.div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * steps_per_epoch;

    let mut win_rng = Rng::stream(tcfg.seed, StreamKind::Windows);
    let mut noise_rng = Rng::stream(tcfg.seed, StreamKind::Noise);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut since_best = 0usize;
    let mut global_step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=tcfg.epochs {
        epochs_run = epoch;
        let mut windows: Vec<Window> = Vec::with_capacity(windows_per_epoch);
        for item in &items {
            let frames = item.seq.frames();
            for spec in sample_windows(frames, mcfg.window, &mut win_rng, tcfg.fixed_stride) {
                windows.push(materialize(item, spec, mcfg.window, frames));
            }
        }
        win_rng.shuffle(&mut windows);

        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for batch in windows.chunks(tcfg.batch_size) {
            let eps: Vec<Option<Tensor<f32>>> = batch
                .iter()
                .map(|_| {
                    mcfg.mode
                        .uses_attention()
                        .then(|| noise_rng.normal_tensor(&[mcfg.window, mcfg.latent_dim]))
                })
                .collect();

            let results: Result<Vec<(ParamGrads<f32>, LossBreakdown)>> = pool.install(|| {
                batch
                    .par_iter()
                    .zip(eps.par_iter())
                    .map(|(w, e)| eval_window(&params, mcfg, tcfg, w, e.as_ref()))
                    .collect()
            });
            let results = results?;

            // ordered reduction keeps the step deterministic for any
            // thread count
            let mut iter = results.into_iter();
            let (mut grads, first_losses) = iter.next().expect("non-empty batch");
            let mut sums = first_losses;
            for (g, l) in iter {
                grads.accumulate(&g);
                sums.l_cls += l.l_cls;
                sums.l_rec += l.l_rec;
                sums.l_kld += l.l_kld;
                sums.total += l.total;
                sums.frames_counted += l.frames_counted;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n as f32);
            let lr = cosine_lr(global_step, total_steps, tcfg.lr0);
            adam_step(&mut params, &grads, &mut opt, lr);
            global_step += 1;

            let record = StepRecord {
                epoch,
                step: global_step,
                lr,
                l_cls: sums.l_cls / n,
                l_rec: sums.l_rec / n,
                l_kld: sums.l_kld / n,
                total: sums.total / n,
            };
            if !record.total.is_finite() {
                return Err(PtmaError::numeric(format!(
                    "loss diverged at step {global_step}"
                )));
            }
            epoch_losses.push(record.clone());
            log.steps.push(record);
        }

        let mean = |f: fn(&StepRecord) -> f64| {
            epoch_losses.iter().map(f).sum::<f64>() / epoch_losses.len().max(1) as f64
        };
        let val_map = if val.is_empty() {
            None
        } else {
            Some(pool.install(|| validation_map(&params, mcfg, val))?)
        };

        let mut is_best = false;
        if let Some(vm) = val_map {
            let improved = best.as_ref().map(|(b, _, _)| vm > *b).unwrap_or(true);
            if improved {
                best = Some((vm, epoch, params.clone()));
                since_best = 0;
                is_best = true;
            } else {
                since_best += 1;
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            l_cls: mean(|s| s.l_cls),
            l_rec: mean(|s| s.l_rec),
            l_kld: mean(|s| s.l_kld),
            total: mean(|s| s.total),
            val_map,
            best: is_best,
        });

        if val_map.is_some() && since_best >= tcfg.patience {
            break;
        }
    }

    let (best_val_map, best_epoch, params) = match best {
        Some((vm, e, p)) => (Some(vm), e, p),
        None => (None, epochs_run, params),
    };
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
        epochs_run,
        best_val_map,
    })
}

// ---------------------------------------------------------------------------
// Whole-window gradient check
// ---------------------------------------------------------------------------

/// Verifies every parameter's gradient of the combined window loss against
/// central finite differences (double precision, fixed noise draw).
pub fn window_grad_check(
    mcfg: &ModelConfig,
    weights: &LossWeights,
    seed: u64,
    fd_eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    mcfg.validate()?;
    let mut init_rng = Rng::stream(seed, StreamKind::Init);
    let params = ModelParams::<f64>::init(mcfg, &mut init_rng);
    let mut data_rng = Rng::stream(seed, StreamKind::Windows);
    let x: Tensor<f64> = data_rng.normal_tensor(&[mcfg.window, mcfg.input_dim]);
    let labels: Vec<u16> = (0..mcfg.window)
        .map(|_| data_rng.below(mcfg.num_classes()) as u16)
        .collect();
    let valid = vec![true; mcfg.window];
    let noise: Option<Tensor<f64>> = mcfg
        .mode
        .uses_attention()
        .then(|| Rng::stream(seed, StreamKind::Noise).normal_tensor(&[mcfg.window, mcfg.latent_dim]));

    let named: Vec<(&'static str, Tensor<f64>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    grad_check(
        &named,
        |tape, vars| {
            let bound = BoundParams::from_ids(vars);
            let trace = forward_window_bound(tape, &bound, mcfg, &x, noise.as_ref())?;
            let (total, _) = window_objective(
                tape,
                &trace,
                mcfg.mode,
                &labels,
                &valid,
                &x,
                weights,
                false,
            )?;
            Ok(total)
        },
        fd_eps,
        tol,
    )
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn mode_code(mode: Mode) -> u32 {
    match mode {
        Mode::BaselineGru => 0,
        Mode::QueryOnly => 1,
        Mode::Autoencoder => 2,
        Mode::KldOnly => 3,
        Mode::Full => 4,
    }
}

fn mode_from_code(code: u32) -> Result<Mode> {
    Ok(match code {
        0 => Mode::BaselineGru,
        1 => Mode::QueryOnly,
        2 => Mode::Autoencoder,
        3 => Mode::KldOnly,
        4 => Mode::Full,
        other => return Err(PtmaError::data(format!("bad mode code {other}"))),
    })
}

/// Serialized config block shared by checkpoints and digests.
pub fn config_bytes(cfg: &ModelConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    for v in [
        cfg.input_dim as u32,
        cfg.embed_dim as u32,
        cfg.latent_dim as u32,
        cfg.num_actions as u32,
        cfg.window as u32,
        cfg.enc_hidden as u32,
        cfg.dec_hidden as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match cfg.alpha {
        Some(a) => {
            buf.push(1);
            buf.extend_from_slice(&a.to_le_bytes());
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&mode_code(cfg.mode).to_le_bytes());
    buf
}

pub fn save_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let to_io = |e: std::io::Error| PtmaError::io(path.display().to_string(), e);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_bytes(cfg));
    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(to_io)?;
    f.write_all(&buf).map_err(to_io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let to_io = |e: std::io::Error| PtmaError::io(path.display().to_string(), e);
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(to_io)?
        .read_to_end(&mut bytes)
        .map_err(to_io)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *off + n > bytes.len() {
            return Err(PtmaError::data(format!(
                "{}: truncated checkpoint at offset {}",
                path.display(),
                off
            )));
        }
        let s = bytes[*off..*off + n].to_vec();
        *off += n;
        Ok(s)
    };
    let read_u32 = |off: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };

    if take(&mut off, 8)? != CHECKPOINT_MAGIC {
        return Err(PtmaError::data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut off)?;
    if version != CHECKPOINT_VERSION {
        return Err(PtmaError::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let dims: Vec<usize> = (0..7)
        .map(|_| read_u32(&mut off).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let alpha = match take(&mut off, 1)?[0] {
        0 => None,
        1 => Some(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap())),
        other => {
            return Err(PtmaError::data(format!(
                "{}: bad alpha flag {other}",
                path.display()
            )))
        }
    };
    let mode = mode_from_code(read_u32(&mut off)?)?;
    let cfg = ModelConfig {
        input_dim: dims[0],
        embed_dim: dims[1],
        latent_dim: dims[2],
        num_actions: dims[3],
        window: dims[4],
        enc_hidden: dims[5],
        dec_hidden: dims[6],
        alpha,
        mode,
    };
    cfg.validate()?;

    let count = read_u32(&mut off)? as usize;
    let mut params = ModelParams::<f32>::zeroed(&cfg);
    let mut filled = 0usize;
    for _ in 0..count {
        let name_len = read_u32(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, name_len)?)
            .map_err(|_| PtmaError::data("checkpoint parameter name is not utf-8"))?;
        let rank = read_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()));
        }
        let tensor = Tensor::new(shape, data)?;
        let slot = params
            .named_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                PtmaError::data(format!("checkpoint has unknown parameter '{name}'"))
            })?;
        if slot.1.shape() != tensor.shape() {
            return Err(PtmaError::data(format!(
                "parameter '{name}': shape {:?} does not fit config ({:?})",
                tensor.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = tensor;
        filled += 1;
    }
    if filled != params.named().len() {
        return Err(PtmaError::data(format!(
            "checkpoint fills {} of {} parameters",
            filled,
            params.named().len()
        )));
    }
    if off != bytes.len() {
        return Err(PtmaError::data(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - off
        )));
    }
    Ok((cfg, params))
}
