//! The two-branch window model.
//!
//! The classification branch projects per-frame features into an embedding
//! space, runs a single-layer GRU left to right, and refines the raw
//! encodings `H` by attention before the linear classifier. The
//! probabilistic branch encodes each frame independently into a Gaussian
//! `(mu, sigma)`, samples `z = mu + sigma * eps`, expands `z` into the
//! embedding space as attention queries, and (when active) decodes `z` back
//! into feature space for the reconstruction loss.
//!
//! Attention is band-limited: query `i` sees keys `j` with
//! `i - T < j <= i`, enforced by an additive mask so the same code path
//! serves a training window (`K = T`) and a whole video (`K > T`).

use crate::error::{PtmaError, Result};
use crate::numerics::tensor::{self, real, Scalar, Tensor, NEG_MASK};
use crate::numerics::{Tape, VarId};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Training modes: which branch pieces run and which losses apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Plain GRU + classifier; no probabilistic branch, no attention.
    #[serde(rename = "baseline-gru")]
    BaselineGru,
    /// Encoder and query expansion drive attention, but neither
    /// reconstruction nor KL loss applies (a learnable query mechanism).
    #[serde(rename = "query-only")]
    QueryOnly,
    /// Reconstruction loss on, KL off: the branch degenerates to an
    /// autoencoder.
    #[serde(rename = "ae")]
    Autoencoder,
    /// KL loss on, reconstruction off.
    #[serde(rename = "kld-only")]
    KldOnly,
    /// Everything on.
    #[serde(rename = "full")]
    Full,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "baseline-gru" => Mode::BaselineGru,
            "query-only" => Mode::QueryOnly,
            "ae" => Mode::Autoencoder,
            "kld-only" => Mode::KldOnly,
            "full" => Mode::Full,
            other => {
                return Err(PtmaError::Usage(format!(
                    "unknown mode '{other}' (expected baseline-gru|query-only|ae|kld-only|full)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::BaselineGru => "baseline-gru",
            Mode::QueryOnly => "query-only",
            Mode::Autoencoder => "ae",
            Mode::KldOnly => "kld-only",
            Mode::Full => "full",
        }
    }

    /// Does the probabilistic encoder (and attention) run at all?
    pub fn uses_attention(&self) -> bool {
        !matches!(self, Mode::BaselineGru)
    }

    /// Does the decoder run? (Loss gating is separate; see `objectives`.)
    pub fn uses_decoder(&self) -> bool {
        matches!(self, Mode::Autoencoder | Mode::KldOnly | Mode::Full)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension D.
    pub input_dim: usize,
    /// Embedding dimension E: GRU hidden size and attention key dim. With
    /// `embed_dim == input_dim` the query expansion maps latents straight
    /// into feature space.
    pub embed_dim: usize,
    /// Latent dimension D_z.
    pub latent_dim: usize,
    /// Action class count C; frame labels live in 0..=C with 0 = background.
    pub num_actions: usize,
    /// Temporal window length T.
    pub window: usize,
    /// Attention temperature; scores are divided by sqrt(alpha). Defaults to
    /// the embedding dimension.
    pub alpha: Option<f64>,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub mode: Mode,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_actions: usize) -> Self {
        ModelConfig {
            input_dim,
            embed_dim: 512,
            latent_dim: 256,
            num_actions,
            window: 256,
            alpha: None,
            enc_hidden: 256,
            dec_hidden: 256,
            mode: Mode::Full,
        }
    }

    /// Desk-scale configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_dim: 8,
            embed_dim: 6,
            latent_dim: 3,
            num_actions: 2,
            window: 4,
            alpha: None,
            enc_hidden: 5,
            dec_hidden: 5,
            mode: Mode::Full,
        }
    }

    /// Number of classifier outputs: C action classes plus background.
    pub fn num_classes(&self) -> usize {
        self.num_actions + 1
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.embed_dim as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input-dim", self.input_dim),
            ("embed-dim", self.embed_dim),
            ("latent-dim", self.latent_dim),
            ("actions", self.num_actions),
            ("window", self.window),
            ("enc-hidden", self.enc_hidden),
            ("dec-hidden", self.dec_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(PtmaError::config(format!("{name} must be >= 1")));
            }
        }
        if self.effective_alpha() <= 0.0 {
            return Err(PtmaError::config("alpha must be > 0"));
        }
        Ok(())
    }
}

/// All learnable weights. Shapes derive solely from [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub input_proj_w: Tensor<T>, // D x E
    pub input_proj_b: Tensor<T>, // 1 x E
    pub gru_w_update: Tensor<T>, // E x E
    pub gru_u_update: Tensor<T>, // E x E
    pub gru_b_update: Tensor<T>, // 1 x E
    pub gru_w_reset: Tensor<T>,
    pub gru_u_reset: Tensor<T>,
    pub gru_b_reset: Tensor<T>,
    pub gru_w_cand: Tensor<T>,
    pub gru_u_cand: Tensor<T>,
    pub gru_b_cand: Tensor<T>,
    pub enc_w: Tensor<T>,     // D x enc_hidden
    pub enc_b: Tensor<T>,     // 1 x enc_hidden
    pub mu_w: Tensor<T>,      // enc_hidden x D_z
    pub mu_b: Tensor<T>,      // 1 x D_z
    pub logvar_w: Tensor<T>,  // enc_hidden x D_z
    pub logvar_b: Tensor<T>,  // 1 x D_z
    pub dec_w: Tensor<T>,     // D_z x dec_hidden
    pub dec_b: Tensor<T>,     // 1 x dec_hidden
    pub dec_out_w: Tensor<T>, // dec_hidden x D
    pub dec_out_b: Tensor<T>, // 1 x D
    pub query_w: Tensor<T>,   // D_z x E
    pub query_b: Tensor<T>,   // 1 x E
    pub cls_w: Tensor<T>,     // E x (C+1)
    pub cls_b: Tensor<T>,     // 1 x (C+1)
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform weights, zero biases. The zero log-variance bias makes
    /// sigma start at 1.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let xavier = |rng: &mut Rng, rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            rng.uniform_tensor::<T>(&[rows, cols], a)
        };
        let zeros = |cols: usize| Tensor::zeros(&[1, cols]);
        let (d, e, dz, c1) = (
            cfg.input_dim,
            cfg.embed_dim,
            cfg.latent_dim,
            cfg.num_classes(),
        );
        ModelParams {
            input_proj_w: xavier(rng, d, e),
            input_proj_b: zeros(e),
            gru_w_update: xavier(rng, e, e),
            gru_u_update: xavier(rng, e, e),
            gru_b_update: zeros(e),
            gru_w_reset: xavier(rng, e, e),
            gru_u_reset: xavier(rng, e, e),
            gru_b_reset: zeros(e),
            gru_w_cand: xavier(rng, e, e),
            gru_u_cand: xavier(rng, e, e),
            gru_b_cand: zeros(e),
            enc_w: xavier(rng, d, cfg.enc_hidden),
            enc_b: zeros(cfg.enc_hidden),
            mu_w: xavier(rng, cfg.enc_hidden, dz),
            mu_b: zeros(dz),
            logvar_w: xavier(rng, cfg.enc_hidden, dz),
            logvar_b: zeros(dz),
            dec_w: xavier(rng, dz, cfg.dec_hidden),
            dec_b: zeros(cfg.dec_hidden),
            dec_out_w: xavier(rng, cfg.dec_hidden, d),
            dec_out_b: zeros(d),
            query_w: xavier(rng, dz, e),
            query_b: zeros(e),
            cls_w: xavier(rng, e, c1),
            cls_b: zeros(c1),
        }
    }

    /// All-zero parameters of the right shapes (useful in tests).
    pub fn zeroed(cfg: &ModelConfig) -> Self {
        let mut rng = Rng::from_seed(0);
        let mut p = Self::init(cfg, &mut rng);
        for (_, t) in p.named_mut() {
            *t = Tensor::zeros(t.shape());
        }
        p
    }

    /// Parameters in their canonical order (checkpoints, optimizer state and
    /// gradient maps all follow it).
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("input_proj.w", &self.input_proj_w),
            ("input_proj.b", &self.input_proj_b),
            ("gru.w_update", &self.gru_w_update),
            ("gru.u_update", &self.gru_u_update),
            ("gru.b_update", &self.gru_b_update),
            ("gru.w_reset", &self.gru_w_reset),
            ("gru.u_reset", &self.gru_u_reset),
            ("gru.b_reset", &self.gru_b_reset),
            ("gru.w_cand", &self.gru_w_cand),
            ("gru.u_cand", &self.gru_u_cand),
            ("gru.b_cand", &self.gru_b_cand),
            ("enc.w", &self.enc_w),
            ("enc.b", &self.enc_b),
            ("enc.mu.w", &self.mu_w),
            ("enc.mu.b", &self.mu_b),
            ("enc.logvar.w", &self.logvar_w),
            ("enc.logvar.b", &self.logvar_b),
            ("dec.w", &self.dec_w),
            ("dec.b", &self.dec_b),
            ("dec.out.w", &self.dec_out_w),
            ("dec.out.b", &self.dec_out_b),
            ("query.w", &self.query_w),
            ("query.b", &self.query_b),
            ("cls.w", &self.cls_w),
            ("cls.b", &self.cls_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("input_proj.w", &mut self.input_proj_w),
            ("input_proj.b", &mut self.input_proj_b),
            ("gru.w_update", &mut self.gru_w_update),
            ("gru.u_update", &mut self.gru_u_update),
            ("gru.b_update", &mut self.gru_b_update),
            ("gru.w_reset", &mut self.gru_w_reset),
            ("gru.u_reset", &mut self.gru_u_reset),
            ("gru.b_reset", &mut self.gru_b_reset),
            ("gru.w_cand", &mut self.gru_w_cand),
            ("gru.u_cand", &mut self.gru_u_cand),
            ("gru.b_cand", &mut self.gru_b_cand),
            ("enc.w", &mut self.enc_w),
            ("enc.b", &mut self.enc_b),
            ("enc.mu.w", &mut self.mu_w),
            ("enc.mu.b", &mut self.mu_b),
            ("enc.logvar.w", &mut self.logvar_w),
            ("enc.logvar.b", &mut self.logvar_b),
            ("dec.w", &mut self.dec_w),
            ("dec.b", &mut self.dec_b),
            ("dec.out.w", &mut self.dec_out_w),
            ("dec.out.b", &mut self.dec_out_b),
            ("query.w", &mut self.query_w),
            ("query.b", &mut self.query_b),
            ("cls.w", &mut self.cls_w),
            ("cls.b", &mut self.cls_b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            input_proj_w: self.input_proj_w.cast(),
            input_proj_b: self.input_proj_b.cast(),
            gru_w_update: self.gru_w_update.cast(),
            gru_u_update: self.gru_u_update.cast(),
            gru_b_update: self.gru_b_update.cast(),
            gru_w_reset: self.gru_w_reset.cast(),
            gru_u_reset: self.gru_u_reset.cast(),
            gru_b_reset: self.gru_b_reset.cast(),
            gru_w_cand: self.gru_w_cand.cast(),
            gru_u_cand: self.gru_u_cand.cast(),
            gru_b_cand: self.gru_b_cand.cast(),
            enc_w: self.enc_w.cast(),
            enc_b: self.enc_b.cast(),
            mu_w: self.mu_w.cast(),
            mu_b: self.mu_b.cast(),
            logvar_w: self.logvar_w.cast(),
            logvar_b: self.logvar_b.cast(),
            dec_w: self.dec_w.cast(),
            dec_b: self.dec_b.cast(),
            dec_out_w: self.dec_out_w.cast(),
            dec_out_b: self.dec_out_b.cast(),
            query_w: self.query_w.cast(),
            query_b: self.query_b.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
        }
    }
}

/// Tape handles for one window's parameter leaves, bound in canonical order
/// so gradient maps line up across windows.
pub struct BoundParams {
    pub input_proj_w: VarId,
    pub input_proj_b: VarId,
    pub gru_w_update: VarId,
    pub gru_u_update: VarId,
    pub gru_b_update: VarId,
    pub gru_w_reset: VarId,
    pub gru_u_reset: VarId,
    pub gru_b_reset: VarId,
    pub gru_w_cand: VarId,
    pub gru_u_cand: VarId,
    pub gru_b_cand: VarId,
    pub enc_w: VarId,
    pub enc_b: VarId,
    pub mu_w: VarId,
    pub mu_b: VarId,
    pub logvar_w: VarId,
    pub logvar_b: VarId,
    pub dec_w: VarId,
    pub dec_b: VarId,
    pub dec_out_w: VarId,
    pub dec_out_b: VarId,
    pub query_w: VarId,
    pub query_b: VarId,
    pub cls_w: VarId,
    pub cls_b: VarId,
}

impl BoundParams {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> BoundParams {
        let mut ids = Vec::with_capacity(25);
        for (name, t) in params.named() {
            ids.push(tape.param(name, t.clone()));
        }
        Self::from_ids(&ids)
    }

    /// Wires up handles already registered on a tape, in canonical order
    /// (the order of [`ModelParams::named`]).
    pub fn from_ids(ids: &[VarId]) -> BoundParams {
        assert_eq!(ids.len(), 25, "expected the 25 canonical parameters");
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("25 parameters");
        BoundParams {
            input_proj_w: next(),
            input_proj_b: next(),
            gru_w_update: next(),
            gru_u_update: next(),
            gru_b_update: next(),
            gru_w_reset: next(),
            gru_u_reset: next(),
            gru_b_reset: next(),
            gru_w_cand: next(),
            gru_u_cand: next(),
            gru_b_cand: next(),
            enc_w: next(),
            enc_b: next(),
            mu_w: next(),
            mu_b: next(),
            logvar_w: next(),
            logvar_b: next(),
            dec_w: next(),
            dec_b: next(),
            dec_out_w: next(),
            dec_out_b: next(),
            query_w: next(),
            query_b: next(),
            cls_w: next(),
            cls_b: next(),
        }
    }
}

// ---------------------------------------------------------------------------
// Temporal mask
// ---------------------------------------------------------------------------

/// Additive attention mask over (query time i, key time j): entry 0 iff
/// `i - T < j <= i`, [`NEG_MASK`] otherwise. Row i always keeps j = i open.
#[derive(Debug, Clone)]
pub struct TemporalMask<T> {
    window: usize,
    matrix: Tensor<T>,
}

impl<T: Scalar> TemporalMask<T> {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn unmasked(&self, i: usize, j: usize) -> bool {
        self.matrix.at(i, j) == T::zero()
    }
}

/// Builds the K x K band mask for window length `window`.
pub fn build_temporal_mask<T: Scalar>(window: usize, k: usize) -> TemporalMask<T> {
    debug_assert!(window >= 1 && k >= 1);
    let mut data = vec![real::<T>(NEG_MASK); k * k];
    for i in 0..k {
        let lo = i.saturating_sub(window - 1);
        for j in lo..=i {
            data[i * k + j] = T::zero();
        }
    }
    TemporalMask {
        window,
        matrix: Tensor::new(vec![k, k], data).expect("k*k data"),
    }
}

// ---------------------------------------------------------------------------
// Tape forward ops
// ---------------------------------------------------------------------------

/// `x . w + b` with `b` broadcast over rows.
fn affine<T: Scalar>(tape: &mut Tape<T>, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// One GRU step on the tape: `x_t` and `h_prev` are `[1, E]`.
fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    x_t: VarId,
    h_prev: VarId,
) -> Result<VarId> {
    let zx = affine(tape, x_t, p.gru_w_update, p.gru_b_update)?;
    let zh = tape.matmul(h_prev, p.gru_u_update)?;
    let zsum = tape.add(zx, zh)?;
    let update = tape.sigmoid(zsum)?;

    let rx = affine(tape, x_t, p.gru_w_reset, p.gru_b_reset)?;
    let rh = tape.matmul(h_prev, p.gru_u_reset)?;
    let rsum = tape.add(rx, rh)?;
    let reset = tape.sigmoid(rsum)?;

    let nx = affine(tape, x_t, p.gru_w_cand, p.gru_b_cand)?;
    let gated = tape.mul(reset, h_prev)?;
    let nh = tape.matmul(gated, p.gru_u_cand)?;
    let nsum = tape.add(nx, nh)?;
    let cand = tape.tanh(nsum)?;

    // h = (1 - update) * cand + update * h_prev
    let neg_update = tape.scale(update, -T::one())?;
    let one_minus = tape.add_scalar(neg_update, T::one())?;
    let a = tape.mul(one_minus, cand)?;
    let b = tape.mul(update, h_prev)?;
    tape.add(a, b)
}

/// Runs the projected GRU over a `[T, D]` window; returns `H` as `[T, E]`.
/// `h_init` defaults to zeros.
pub fn gru_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    x: VarId,
    h_init: Option<VarId>,
) -> Result<VarId> {
    let rows = tape.value(x).rows();
    let projected = affine(tape, x, p.input_proj_w, p.input_proj_b)?;
    let mut h = match h_init {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(&[1, cfg.embed_dim])),
    };
    let mut steps = Vec::with_capacity(rows);
    for t in 0..rows {
        let x_t = tape.slice_rows(projected, t, 1)?;
        h = gru_step(tape, p, x_t, h)?;
        steps.push(h);
    }
    tape.concat_rows(&steps)
}

/// Per-frame probabilistic encoder: `X [T, D] -> (mu, sigma)`, each
/// `[T, D_z]`. `sigma = exp(logvar / 2)`, hence strictly positive.
pub fn prob_encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    x: VarId,
) -> Result<(VarId, VarId)> {
    let pre = affine(tape, x, p.enc_w, p.enc_b)?;
    let hidden = tape.relu(pre)?;
    let mu = affine(tape, hidden, p.mu_w, p.mu_b)?;
    let logvar = affine(tape, hidden, p.logvar_w, p.logvar_b)?;
    let half = tape.scale(logvar, real::<T>(0.5))?;
    let sigma = tape.exp(half)?;
    Ok((mu, sigma))
}

/// `z = mu + sigma * eps` with `eps` a constant draw, so gradient flows to
/// `mu` and `sigma` only.
pub fn reparameterize<T: Scalar>(
    tape: &mut Tape<T>,
    mu: VarId,
    sigma: VarId,
    eps: &Tensor<T>,
) -> Result<VarId> {
    if eps.shape() != tape.value(mu).shape() {
        return Err(PtmaError::Shape {
            op: "reparameterize",
            shapes: format!("eps {:?} vs mu {:?}", eps.shape(), tape.value(mu).shape()),
        });
    }
    let eps_var = tape.constant(eps.clone());
    let scaled = tape.mul(sigma, eps_var)?;
    tape.add(mu, scaled)
}

/// Decoder: `z [T, D_z] -> X_rec [T, D]`, per frame.
pub fn prob_decode<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, z: VarId) -> Result<VarId> {
    let pre = affine(tape, z, p.dec_w, p.dec_b)?;
    let hidden = tape.relu(pre)?;
    affine(tape, hidden, p.dec_out_w, p.dec_out_b)
}

/// Band-masked attention: queries are the expanded latents, keys and values
/// are the raw GRU encodings. Returns `A [K, E]`.
pub fn tma_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    z: VarId,
    h: VarId,
    mask: &TemporalMask<T>,
    alpha: f64,
) -> Result<VarId> {
    let k = tape.value(h).rows();
    if mask.matrix().shape() != [k, k] {
        return Err(PtmaError::Shape {
            op: "tma_attention",
            shapes: format!("mask {:?} vs {} keys", mask.matrix().shape(), k),
        });
    }
    let queries = affine(tape, z, p.query_w, p.query_b)?;
    let h_t = tape.transpose(h)?;
    let scores = tape.matmul(queries, h_t)?;
    let scaled = tape.scale(scores, real::<T>(1.0 / alpha.sqrt()))?;
    let mask_var = tape.constant(mask.matrix().clone());
    let weights = tape.softmax_masked(scaled, mask_var)?;
    tape.matmul(weights, h)
}

// ---------------------------------------------------------------------------
// Window forward
// ---------------------------------------------------------------------------

/// Tape handles for every intermediate of one window, kept for the backward
/// pass and for inspection. Branch-dependent pieces are `None` when the
/// mode skips them.
pub struct ForwardTrace<T> {
    pub h: VarId,
    pub mu: Option<VarId>,
    pub sigma: Option<VarId>,
    pub eps: Option<Tensor<T>>,
    pub z: Option<VarId>,
    pub recon: Option<VarId>,
    pub attn: Option<VarId>,
    pub refined: VarId,
    pub logits: VarId,
}

/// Owned values extracted from a trace.
#[derive(Debug, Clone)]
pub struct TraceValues<T> {
    pub h: Tensor<T>,
    pub mu: Option<Tensor<T>>,
    pub sigma: Option<Tensor<T>>,
    pub eps: Option<Tensor<T>>,
    pub z: Option<Tensor<T>>,
    pub recon: Option<Tensor<T>>,
    /// Zero when the mode has no attention.
    pub attn: Tensor<T>,
    pub refined: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn values(&self, tape: &Tape<T>) -> TraceValues<T> {
        let grab = |v: &Option<VarId>| v.map(|id| tape.value(id).clone());
        let h = tape.value(self.h).clone();
        let attn = self
            .attn
            .map(|id| tape.value(id).clone())
            .unwrap_or_else(|| Tensor::zeros(h.shape()));
        TraceValues {
            h,
            mu: grab(&self.mu),
            sigma: grab(&self.sigma),
            eps: self.eps.clone(),
            z: grab(&self.z),
            recon: grab(&self.recon),
            attn,
            refined: tape.value(self.refined).clone(),
            logits: tape.value(self.logits).clone(),
        }
    }
}

/// Runs both branches over one `[T, D]` window according to the mode.
///
/// `eps`: reparameterization noise for training; `None` uses `z = mu`
/// (deterministic inference). Rejected in baseline mode, where no latent
/// exists to perturb.
pub fn forward_window<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    eps: Option<&Tensor<T>>,
) -> Result<ForwardTrace<T>> {
    let p = BoundParams::bind(tape, params);
    forward_window_bound(tape, &p, cfg, x, eps)
}

/// Same as [`forward_window`] but over parameter leaves the caller has
/// already registered (gradient checking perturbs them one by one).
pub fn forward_window_bound<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    eps: Option<&Tensor<T>>,
) -> Result<ForwardTrace<T>> {
    cfg.validate()?;
    if x.rank() != 2 || x.shape() != [cfg.window, cfg.input_dim] {
        return Err(PtmaError::Shape {
            op: "forward_window",
            shapes: format!(
                "features {:?}, config wants [{}, {}]",
                x.shape(),
                cfg.window,
                cfg.input_dim
            ),
        });
    }
    if eps.is_some() && !cfg.mode.uses_attention() {
        return Err(PtmaError::config(
            "reparameterization noise given, but mode baseline-gru has no latent branch",
        ));
    }
    let x_var = tape.constant(x.clone());
    let h = gru_forward(tape, p, cfg, x_var, None)?;

    let mut trace = ForwardTrace {
        h,
        mu: None,
        sigma: None,
        eps: None,
        z: None,
        recon: None,
        attn: None,
        refined: h,
        logits: h, // overwritten below
    };

    if cfg.mode.uses_attention() {
        let (mu, sigma) = prob_encode(tape, p, x_var)?;
        let z = match eps {
            Some(e) => {
                trace.eps = Some(e.clone());
                reparameterize(tape, mu, sigma, e)?
            }
            None => mu,
        };
        if cfg.mode.uses_decoder() {
            trace.recon = Some(prob_decode(tape, p, z)?);
        }
        let mask = build_temporal_mask::<T>(cfg.window, cfg.window);
        let attn = tma_attention(tape, p, z, h, &mask, cfg.effective_alpha())?;
        trace.mu = Some(mu);
        trace.sigma = Some(sigma);
        trace.z = Some(z);
        trace.attn = Some(attn);
        trace.refined = tape.add(h, attn)?;
    }

    trace.logits = affine(tape, trace.refined, p.cls_w, p.cls_b)?;
    debug_assert!(
        tape.value(trace.logits).is_finite(),
        "window forward diverged"
    );
    Ok(trace)
}

/// Convenience wrapper drawing fresh reparameterization noise when the mode
/// has a latent branch.
pub fn forward_window_sampled<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    rng: &mut Rng,
) -> Result<ForwardTrace<T>> {
    let eps: Option<Tensor<T>> = cfg
        .mode
        .uses_attention()
        .then(|| rng.normal_tensor(&[cfg.window, cfg.latent_dim]));
    forward_window(tape, params, cfg, x, eps.as_ref())
}

// ---------------------------------------------------------------------------
// Value-path kernels (inference; shared by stream and batch)
// ---------------------------------------------------------------------------

/// `x . w + b` on plain tensors.
pub(crate) fn affine_value<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let xw = tensor::matmul(x, w)?;
    tensor::add(&xw, b)
}

/// One GRU step on plain tensors; `x_t`, `h_prev` are `[1, E]`.
pub(crate) fn gru_cell_value<T: Scalar>(
    params: &ModelParams<T>,
    x_t: &Tensor<T>,
    h_prev: &Tensor<T>,
) -> Result<Tensor<T>> {
    let zx = affine_value(x_t, &params.gru_w_update, &params.gru_b_update)?;
    let zh = tensor::matmul(h_prev, &params.gru_u_update)?;
    let update = tensor::sigmoid(&tensor::add(&zx, &zh)?);

    let rx = affine_value(x_t, &params.gru_w_reset, &params.gru_b_reset)?;
    let rh = tensor::matmul(h_prev, &params.gru_u_reset)?;
    let reset = tensor::sigmoid(&tensor::add(&rx, &rh)?);

    let nx = affine_value(x_t, &params.gru_w_cand, &params.gru_b_cand)?;
    let gated = tensor::mul(&reset, h_prev)?;
    let nh = tensor::matmul(&gated, &params.gru_u_cand)?;
    let cand = tensor::tanh(&tensor::add(&nx, &nh)?);

    let one_minus = tensor::add_scalar(&tensor::scale(&update, -T::one()), T::one());
    let a = tensor::mul(&one_minus, &cand)?;
    let b = tensor::mul(&update, h_prev)?;
    tensor::add(&a, &b)
}

/// Projects raw features into the embedding space.
pub(crate) fn project_value<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    affine_value(x, &params.input_proj_w, &params.input_proj_b)
}

/// Per-frame latent mean (inference uses `z = mu`).
pub(crate) fn encode_mu_value<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let hidden = tensor::relu(&affine_value(x, &params.enc_w, &params.enc_b)?);
    affine_value(&hidden, &params.mu_w, &params.mu_b)
}

/// Expands latents into attention queries.
pub(crate) fn query_value<T: Scalar>(params: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    affine_value(z, &params.query_w, &params.query_b)
}

/// Classifier probabilities for refined encodings `[K, E]`.
pub(crate) fn class_scores_value<T: Scalar>(
    params: &ModelParams<T>,
    refined: &Tensor<T>,
) -> Result<Tensor<T>> {
    let logits = affine_value(refined, &params.cls_w, &params.cls_b)?;
    let zeros = Tensor::zeros(logits.shape());
    tensor::softmax_masked(&logits, &zeros)
}
