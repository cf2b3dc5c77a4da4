//! Frame-by-frame inference over unbounded videos.
//!
//! The GRU hidden state carries the whole history; only attention is
//! band-limited, looking at the last `T` raw encodings held in a ring
//! buffer. State size is `O(T * E)` regardless of video length, and the
//! per-frame outputs match full-sequence batch inference under the temporal
//! mask row for row: the buffer holds exactly the band `i - T < j <= i`, in
//! ascending time order, and the masked batch softmax zeroes everything
//! else (note the locality claim is about the attention term; the recurrent
//! hidden state intentionally remembers further back).
//!
//! Inference is deterministic: the latent query is the encoder mean.

use crate::error::{PtmaError, Result};
use crate::model::{
    build_temporal_mask, class_scores_value, encode_mu_value, gru_cell_value, project_value,
    query_value, ModelConfig, ModelParams,
};
use crate::numerics::tensor::{self, real, Scalar, Tensor};
use std::collections::VecDeque;

/// Carry-over state for one video stream.
#[derive(Debug, Clone)]
pub struct StreamState<T> {
    hidden: Tensor<T>,
    /// Last <= T raw encodings, oldest first.
    keys: VecDeque<Tensor<T>>,
    /// Last <= T expanded latent queries, oldest first (kept for
    /// inspection; the current frame only ever uses the newest).
    queries: VecDeque<Tensor<T>>,
    frames_seen: usize,
}

impl<T: Scalar> StreamState<T> {
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn buffered(&self) -> usize {
        self.keys.len()
    }

    pub fn hidden(&self) -> &Tensor<T> {
        &self.hidden
    }

    pub fn queries(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.queries.iter()
    }
}

impl<T: Scalar> PartialEq for StreamState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.hidden == other.hidden
            && self.keys == other.keys
            && self.queries == other.queries
            && self.frames_seen == other.frames_seen
    }
}

/// Fresh state: zero hidden, empty buffers.
pub fn stream_init<T: Scalar>(cfg: &ModelConfig) -> StreamState<T> {
    StreamState {
        hidden: Tensor::zeros(&[1, cfg.embed_dim]),
        keys: VecDeque::with_capacity(cfg.window),
        queries: VecDeque::with_capacity(cfg.window),
        frames_seen: 0,
    }
}

/// Advances one frame: returns the C+1 class probabilities for `x_t`
/// (`[1, D]`) and updates the state in place.
pub fn stream_step<T: Scalar>(
    state: &mut StreamState<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x_t: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x_t.rank() != 2 || x_t.shape() != [1, cfg.input_dim] {
        return Err(PtmaError::Shape {
            op: "stream_step",
            shapes: format!("frame {:?}, config wants [1, {}]", x_t.shape(), cfg.input_dim),
        });
    }
    let projected = project_value(params, x_t)?;
    let h = gru_cell_value(params, &projected, &state.hidden)?;
    state.hidden = h.clone();
    state.frames_seen += 1;

    let refined = if cfg.mode.uses_attention() {
        let mu = encode_mu_value(params, x_t)?;
        let q = query_value(params, &mu)?;
        state.keys.push_back(h.clone());
        state.queries.push_back(q.clone());
        if state.keys.len() > cfg.window {
            state.keys.pop_front();
            state.queries.pop_front();
        }

        // score the newest query against the buffered band, oldest first,
        // mirroring the batch mask row exactly
        let band: Vec<Vec<T>> = state.keys.iter().map(|k| k.row(0).to_vec()).collect();
        let keys = Tensor::from_rows(&band)?;
        let scores = tensor::matmul(&q, &tensor::transpose(&keys)?)?;
        let scaled = tensor::scale(&scores, real::<T>(1.0 / cfg.effective_alpha().sqrt()));
        let weights = tensor::softmax_masked(&scaled, &Tensor::zeros(scaled.shape()))?;
        let attn = tensor::matmul(&weights, &keys)?;
        tensor::add(&h, &attn)?
    } else {
        h
    };
    class_scores_value(params, &refined)
}

/// Reference path: a single GRU pass over all `K` frames and one `K x K`
/// masked attention, using the encoder mean as the query. Returns
/// `K x (C+1)` class probabilities.
pub fn batch_infer<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.cols() != cfg.input_dim {
        return Err(PtmaError::Shape {
            op: "batch_infer",
            shapes: format!("features {:?}, config wants [K, {}]", x.shape(), cfg.input_dim),
        });
    }
    let k = x.rows();
    let projected = project_value(params, x)?;
    let mut h_rows: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut h = Tensor::zeros(&[1, cfg.embed_dim]);
    for t in 0..k {
        let x_t = tensor::slice_rows(&projected, t, 1)?;
        h = gru_cell_value(params, &x_t, &h)?;
        h_rows.push(h.row(0).to_vec());
    }
    let h_all = Tensor::from_rows(&h_rows)?;

    let refined = if cfg.mode.uses_attention() {
        let mu = encode_mu_value(params, x)?;
        let queries = query_value(params, &mu)?;
        let scores = tensor::matmul(&queries, &tensor::transpose(&h_all)?)?;
        let scaled = tensor::scale(&scores, real::<T>(1.0 / cfg.effective_alpha().sqrt()));
        let mask = build_temporal_mask::<T>(cfg.window, k);
        let weights = tensor::softmax_masked(&scaled, mask.matrix())?;
        let attn = tensor::matmul(&weights, &h_all)?;
        tensor::add(&h_all, &attn)?
    } else {
        h_all
    };
    class_scores_value(params, &refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_window, Mode};
    use crate::numerics::Tape;
    use crate::rng::Rng;

    fn small_cfg(window: usize, mode: Mode) -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.window = window;
        cfg.mode = mode;
        cfg
    }

    #[test]
    fn fresh_states_are_identical_and_empty() {
        let cfg = small_cfg(4, Mode::Full);
        let a: StreamState<f64> = stream_init(&cfg);
        let b: StreamState<f64> = stream_init(&cfg);
        assert_eq!(a.frames_seen(), 0);
        assert_eq!(a.buffered(), 0);
        assert!(a == b);
    }

    #[test]
    fn first_step_matches_single_frame_batch() {
        let cfg = small_cfg(4, Mode::Full);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::from_seed(1));
        let x: Tensor<f64> = Rng::from_seed(2).normal_tensor(&[1, cfg.input_dim]);
        let mut state = stream_init(&cfg);
        let streamed = stream_step(&mut state, &params, &cfg, &x).unwrap();
        let batched = batch_infer(&params, &cfg, &x).unwrap();
        assert_eq!(streamed.data(), batched.data());
    }

    #[test]
    fn scores_are_a_distribution() {
        let cfg = small_cfg(3, Mode::Full);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::from_seed(3));
        let mut state = stream_init(&cfg);
        let mut rng = Rng::from_seed(4);
        for _ in 0..10 {
            let x: Tensor<f64> = rng.normal_tensor(&[1, cfg.input_dim]);
            let scores = stream_step(&mut state, &params, &cfg, &x).unwrap();
            let sum: f64 = scores.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(scores.data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn constant_memory_buffer_caps_at_window() {
        let cfg = small_cfg(5, Mode::Full);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::from_seed(5));
        let mut state = stream_init(&cfg);
        let mut rng = Rng::from_seed(6);
        for t in 0..40 {
            let x: Tensor<f64> = rng.normal_tensor(&[1, cfg.input_dim]);
            stream_step(&mut state, &params, &cfg, &x).unwrap();
            assert_eq!(state.buffered(), (t + 1).min(cfg.window));
            assert_eq!(state.queries().count(), state.buffered());
        }
        assert_eq!(state.frames_seen(), 40);
    }

    #[test]
    fn stream_equals_batch_row_for_row_double() {
        let cfg = small_cfg(16, Mode::Full);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::from_seed(7));
        let k = 64;
        let x: Tensor<f64> = Rng::from_seed(8).normal_tensor(&[k, cfg.input_dim]);
        let batched = batch_infer(&params, &cfg, &x).unwrap();
        let mut state = stream_init(&cfg);
        for t in 0..k {
            let x_t = tensor::slice_rows(&x, t, 1).unwrap();
            let scores = stream_step(&mut state, &params, &cfg, &x_t).unwrap();
            let gap = scores
                .data()
                .iter()
                .zip(batched.row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap <= 1e-12, "frame {t}: gap {gap}");
        }
    }

    #[test]
    fn stream_equals_batch_sweep_single_precision() {
        for (ti, t) in [1usize, 4, 16].iter().enumerate() {
            for (ki, k) in [1usize, 7, 64, 256].iter().enumerate() {
                let cfg = small_cfg(*t, Mode::Full);
                let seed = (ti * 10 + ki) as u64;
                let params = ModelParams::<f32>::init(&cfg, &mut Rng::from_seed(seed));
                let x: Tensor<f32> = Rng::from_seed(seed + 100).normal_tensor(&[*k, cfg.input_dim]);
                let batched = batch_infer(&params, &cfg, &x).unwrap();
                let mut state = stream_init(&cfg);
                for frame in 0..*k {
                    let x_t = tensor::slice_rows(&x, frame, 1).unwrap();
                    let scores = stream_step(&mut state, &params, &cfg, &x_t).unwrap();
                    let gap = scores
                        .data()
                        .iter()
                        .zip(batched.row(frame))
                        .map(|(a, b)| (a - b).abs() as f64)
                        .fold(0.0, f64::max);
                    assert!(gap <= 1e-6, "T={t} K={k} frame {frame}: gap {gap}");
                }
            }
        }
    }

    #[test]
    fn stream_equals_batch_in_baseline_mode() {
        let cfg = small_cfg(4, Mode::BaselineGru);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::from_seed(9));
        let x: Tensor<f64> = Rng::from_seed(10).normal_tensor(&[20, cfg.input_dim]);
        let batched = batch_infer(&params, &cfg, &x).unwrap();
        let mut state = stream_init(&cfg);
        for t in 0..20 {
            let x_t = tensor::slice_rows(&x, t, 1).unwrap();
            let scores = stream_step(&mut state, &params, &cfg, &x_t).unwrap();
            assert_eq!(scores.data(), batched.row(t));
            assert_eq!(state.buffered(), 0); // no attention buffer in baseline
        }
    }

    #[test]
    fn batch_at_window_length_matches_forward_window() {
        // K = T: the full-sequence mask is the training window's causal
        // band and there is no padding, so inference reduces to the window
        // forward with z = mu.
        let cfg = small_cfg(6, Mode::Full);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::from_seed(11));
        let x: Tensor<f64> = Rng::from_seed(12).normal_tensor(&[6, cfg.input_dim]);
        let batched = batch_infer(&params, &cfg, &x).unwrap();

        let mut tape = Tape::new();
        let trace = forward_window(&mut tape, &params, &cfg, &x, None).unwrap();
        let logits = tape.value(trace.logits);
        let probs =
            tensor::softmax_masked(logits, &Tensor::zeros(logits.shape())).unwrap();
        assert!(batched.max_abs_diff(&probs) <= 1e-12);
    }
}
