//! The detection network: per-modality LSTM sequence encoders, projections
//! into a common dimension, modality-specific and shared (invariant)
//! subspace encoders, a shared decoder for reconstruction, multi-head
//! self-attention fusion over the stacked representations, and a dense
//! prediction head with video-level score averaging.

use crate::data::SequenceBatch;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint architecture mismatch: expected {expected}, got {got}")]
    ArchMismatch { expected: String, got: String },
    #[error("batch feature dim mismatch: model expects audio {expected_a}/visual {expected_v}, batch has {got_a}/{got_v}")]
    FeatureDim {
        expected_a: usize,
        expected_v: usize,
        got_a: usize,
        got_v: usize,
    },
    #[error("hidden dim {hidden} not divisible by {heads} attention heads")]
    HeadCount { hidden: usize, heads: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Which representation subspaces exist and are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMode {
    Full,
    SpecificOnly,
    InvariantOnly,
}

impl SubspaceMode {
    fn code(self) -> u8 {
        match self {
            SubspaceMode::Full => 0,
            SubspaceMode::SpecificOnly => 1,
            SubspaceMode::InvariantOnly => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SubspaceMode::Full),
            1 => Some(SubspaceMode::SpecificOnly),
            2 => Some(SubspaceMode::InvariantOnly),
            _ => None,
        }
    }

    /// Number of representation rows stacked for attention (4 full, 2 ablated).
    pub fn stack_rows(self) -> usize {
        match self {
            SubspaceMode::Full => 4,
            _ => 2,
        }
    }
}

/// Architecture hyperparameters carried in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub d_audio: usize,
    pub d_visual: usize,
    /// LSTM hidden size and the common representation dimension d.
    pub hidden: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub subspace_mode: SubspaceMode,
}

impl ModelArch {
    fn describe(&self) -> String {
        format!(
            "d_a={} d_v={} hidden={} heads={} head_hidden={} mode={:?}",
            self.d_audio, self.d_visual, self.hidden, self.heads, self.head_hidden,
            self.subspace_mode
        )
    }
}

#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `[d_in x 4h]`, gate order i, f, g, o.
    pub w_x: Tensor,
    /// `[h x 4h]`.
    pub w_h: Tensor,
    /// `[1 x 4h]`; forget-gate slice initialized to 1.
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub heads: Vec<HeadParams>,
    /// `[d x d]` output projection over the concatenated heads.
    pub w_o: Tensor,
}

#[derive(Debug, Clone)]
pub struct PredictHead {
    pub fc1: Affine,
    pub fc2: Affine,
    pub out: Affine,
}

/// All learnable parameters. The shared encoder (delta_c) and decoder
/// (theta_d) are single parameter sets used for both modalities; the
/// specific encoders keep separate storage per modality.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ModelArch,
    pub lstm_a: LstmParams,
    pub lstm_v: LstmParams,
    pub proj_a: Affine,
    pub proj_v: Affine,
    /// T_a / T_v, absent in invariant-only mode.
    pub spec_a: Option<Affine>,
    pub spec_v: Option<Affine>,
    /// E_c, absent in specific-only mode.
    pub shared_enc: Option<Affine>,
    /// D, the shared decoder.
    pub decoder: Affine,
    pub attn: AttnParams,
    pub head: PredictHead,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("dims positive")
}

fn affine(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Affine {
    Affine {
        w: xavier(rng, d_in, d_out),
        b: Tensor::zeros(vec![1, d_out]),
    }
}

fn lstm(rng: &mut ChaCha8Rng, d_in: usize, h: usize) -> LstmParams {
    let mut b = Tensor::zeros(vec![1, 4 * h]);
    // Forget-gate bias starts at 1.
    for j in h..2 * h {
        b.data_mut()[j] = 1.0;
    }
    LstmParams {
        w_x: xavier(rng, d_in, 4 * h),
        w_h: xavier(rng, h, 4 * h),
        b,
    }
}

impl ModelParams {
    pub fn init(arch: ModelArch, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        if arch.hidden % arch.heads != 0 {
            return Err(ModelError::HeadCount {
                hidden: arch.hidden,
                heads: arch.heads,
            });
        }
        let d = arch.hidden;
        let dk = d / arch.heads;
        let mode = arch.subspace_mode;
        let lstm_a = lstm(rng, arch.d_audio, d);
        let lstm_v = lstm(rng, arch.d_visual, d);
        let proj_a = affine(rng, d, d);
        let proj_v = affine(rng, d, d);
        let (spec_a, spec_v) = if mode != SubspaceMode::InvariantOnly {
            (Some(affine(rng, d, d)), Some(affine(rng, d, d)))
        } else {
            (None, None)
        };
        let shared_enc = if mode != SubspaceMode::SpecificOnly {
            Some(affine(rng, d, d))
        } else {
            None
        };
        let decoder = affine(rng, d, d);
        let heads = (0..arch.heads)
            .map(|_| HeadParams {
                w_q: xavier(rng, d, dk),
                w_k: xavier(rng, d, dk),
                w_v: xavier(rng, d, dk),
            })
            .collect();
        let w_o = xavier(rng, d, d);
        let joint = mode.stack_rows() * d;
        let head = PredictHead {
            fc1: affine(rng, joint, arch.head_hidden),
            fc2: affine(rng, arch.head_hidden, arch.head_hidden),
            out: affine(rng, arch.head_hidden, 1),
        };
        Ok(ModelParams {
            arch,
            lstm_a,
            lstm_v,
            proj_a,
            proj_v,
            spec_a,
            spec_v,
            shared_enc,
            decoder,
            attn: AttnParams { heads, w_o },
            head,
        })
    }

    /// Every tensor with its canonical name, in a fixed order shared by the
    /// checkpoint format, the optimizer, and gradient collection.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn aff<'s>(out: &mut Vec<(String, &'s Tensor)>, name: &str, a: &'s Affine) {
            out.push((format!("{name}.w"), &a.w));
            out.push((format!("{name}.b"), &a.b));
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (name, l) in [("lstm_a", &self.lstm_a), ("lstm_v", &self.lstm_v)] {
            out.push((format!("{name}.w_x"), &l.w_x));
            out.push((format!("{name}.w_h"), &l.w_h));
            out.push((format!("{name}.b"), &l.b));
        }
        aff(&mut out, "proj_a", &self.proj_a);
        aff(&mut out, "proj_v", &self.proj_v);
        if let Some(a) = &self.spec_a {
            aff(&mut out, "spec_a", a);
        }
        if let Some(a) = &self.spec_v {
            aff(&mut out, "spec_v", a);
        }
        if let Some(a) = &self.shared_enc {
            aff(&mut out, "shared_enc", a);
        }
        aff(&mut out, "decoder", &self.decoder);
        for (i, h) in self.attn.heads.iter().enumerate() {
            out.push((format!("attn.head{i}.w_q"), &h.w_q));
            out.push((format!("attn.head{i}.w_k"), &h.w_k));
            out.push((format!("attn.head{i}.w_v"), &h.w_v));
        }
        out.push(("attn.w_o".into(), &self.attn.w_o));
        aff(&mut out, "head.fc1", &self.head.fc1);
        aff(&mut out, "head.fc2", &self.head.fc2);
        aff(&mut out, "head.out", &self.head.out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in [&mut self.lstm_a, &mut self.lstm_v] {
            out.push(&mut l.w_x);
            out.push(&mut l.w_h);
            out.push(&mut l.b);
        }
        for a in [&mut self.proj_a, &mut self.proj_v] {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        if let Some(a) = &mut self.spec_a {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        if let Some(a) = &mut self.spec_v {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        if let Some(a) = &mut self.shared_enc {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out.push(&mut self.decoder.w);
        out.push(&mut self.decoder.b);
        for h in &mut self.attn.heads {
            out.push(&mut h.w_q);
            out.push(&mut h.w_k);
            out.push(&mut h.w_v);
        }
        out.push(&mut self.attn.w_o);
        for a in [&mut self.head.fc1, &mut self.head.fc2, &mut self.head.out] {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out
    }

    /// Record every parameter on the tape, in the canonical order, tracked
    /// for gradients when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .named_tensors()
            .iter()
            .map(|(_, t)| {
                if trainable {
                    let mut copy = (*t).clone();
                    copy.requires_grad = true;
                    tape.leaf(&copy)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ModelVars {
            order: vars,
            arch: self.arch.clone(),
            has_specific: self.spec_a.is_some(),
            has_invariant: self.shared_enc.is_some(),
        }
    }

    /// Copy gradients from the tape back onto the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        let order = vars.order.clone();
        for (t, v) in self.tensors_mut().into_iter().zip(order) {
            if let Some(g) = tape.grad(v) {
                t.set_grad(g.to_vec()).expect("tape shapes match parameters");
            }
        }
    }
}

/// Tape handles for one binding of the parameters, in canonical order.
pub struct ModelVars {
    order: Vec<Var>,
    arch: ModelArch,
    has_specific: bool,
    has_invariant: bool,
}

impl ModelVars {
    /// Assemble a binding from leaves already recorded in canonical order
    /// (as produced by leafing `named_tensors` one by one).
    pub fn from_order(
        order: Vec<Var>,
        arch: ModelArch,
        has_specific: bool,
        has_invariant: bool,
    ) -> Self {
        ModelVars {
            order,
            arch,
            has_specific,
            has_invariant,
        }
    }

    // Index bookkeeping mirrors `ModelParams::named_tensors` order.
    fn lstm(&self, modality: usize) -> (Var, Var, Var) {
        let base = modality * 3;
        (self.order[base], self.order[base + 1], self.order[base + 2])
    }

    fn affine_at(&self, base: usize) -> (Var, Var) {
        (self.order[base], self.order[base + 1])
    }

    fn proj(&self, modality: usize) -> (Var, Var) {
        self.affine_at(6 + modality * 2)
    }

    fn spec(&self, modality: usize) -> Option<(Var, Var)> {
        self.has_specific.then(|| self.affine_at(10 + modality * 2))
    }

    fn shared_enc(&self) -> Option<(Var, Var)> {
        let base = 10 + if self.has_specific { 4 } else { 0 };
        self.has_invariant.then(|| self.affine_at(base))
    }

    fn decoder(&self) -> (Var, Var) {
        let base =
            10 + if self.has_specific { 4 } else { 0 } + if self.has_invariant { 2 } else { 0 };
        self.affine_at(base)
    }

    fn attn_head(&self, i: usize) -> (Var, Var, Var) {
        let base = self.decoder_end() + i * 3;
        (self.order[base], self.order[base + 1], self.order[base + 2])
    }

    fn decoder_end(&self) -> usize {
        12 + if self.has_specific { 4 } else { 0 } + if self.has_invariant { 2 } else { 0 }
    }

    fn w_o(&self) -> Var {
        self.order[self.decoder_end() + self.arch.heads * 3]
    }

    fn head(&self) -> [(Var, Var); 3] {
        let base = self.decoder_end() + self.arch.heads * 3 + 1;
        [
            self.affine_at(base),
            self.affine_at(base + 2),
            self.affine_at(base + 4),
        ]
    }
}

/// The four subspace representations (plus inputs and reconstructions) for
/// one batch, as tape handles. Ablated modes leave the missing subspace None.
pub struct SubspaceReps {
    pub u_a: Var,
    pub u_v: Var,
    pub h_a: Option<Var>,
    pub h_v: Option<Var>,
    pub g_a: Option<Var>,
    pub g_v: Option<Var>,
    pub recon_a: Var,
    pub recon_v: Var,
}

/// Per-forward context: dropout is active only in training mode and draws
/// its masks from the supplied stream.
pub struct ForwardCtx<'r> {
    pub train_mode: bool,
    pub dropout: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval(rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx {
            train_mode: false,
            dropout: 0.0,
            rng,
        }
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var, TapeError> {
    if !ctx.train_mode || ctx.dropout <= 0.0 {
        return Ok(x);
    }
    let p = ctx.dropout;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if ctx.rng.random_range(0.0..1.0) < p {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let m = tape.constant_from(shape, mask);
    tape.mul(x, m)
}

fn affine_relu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TapeError> {
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    Ok(tape.relu(y))
}

/// Run one single-layer LSTM over `[B x L x d]` input, returning the final
/// hidden state `[B x h]`.
fn lstm_forward(
    tape: &mut Tape,
    x: &Tensor,
    w_x: Var,
    w_h: Var,
    b: Var,
    hidden: usize,
) -> Result<Var, TapeError> {
    let (batch, len) = (x.shape()[0], x.shape()[1]);
    let mut h = tape.constant_from(vec![batch, hidden], vec![0.0; batch * hidden]);
    let mut c = h;
    for t in 0..len {
        let xt = SequenceBatch::step_matrix(x, t);
        let xt = tape.constant(&xt);
        let gx = tape.matmul(xt, w_x)?;
        let gh = tape.matmul(h, w_h)?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add_row(gates, b)?;
        let i_g = tape.slice_cols(gates, 0, hidden)?;
        let f_g = tape.slice_cols(gates, hidden, hidden)?;
        let g_g = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let o_g = tape.slice_cols(gates, 3 * hidden, hidden)?;
        let i_g = tape.sigmoid(i_g);
        let f_g = tape.sigmoid(f_g);
        let g_g = tape.tanh(g_g);
        let o_g = tape.sigmoid(o_g);
        let fc = tape.mul(f_g, c)?;
        let ig = tape.mul(i_g, g_g)?;
        c = tape.add(fc, ig)?;
        let ct = tape.tanh(c);
        h = tape.mul(o_g, ct)?;
    }
    Ok(h)
}

/// Encode both modality sequences into `u_a, u_v in R^{B x d}`: LSTM final
/// state, then an affine+ReLU projection with dropout in training mode.
pub fn encode_sequences(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &SequenceBatch,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var), ModelError> {
    let arch = &vars.arch;
    let (got_a, got_v) = (batch.x_audio.shape()[2], batch.x_visual.shape()[2]);
    if got_a != arch.d_audio || got_v != arch.d_visual {
        return Err(ModelError::FeatureDim {
            expected_a: arch.d_audio,
            expected_v: arch.d_visual,
            got_a,
            got_v,
        });
    }
    let encode = |x: &Tensor, modality: usize, tape: &mut Tape, ctx: &mut ForwardCtx| {
        let (w_x, w_h, b) = vars.lstm(modality);
        let h = lstm_forward(tape, x, w_x, w_h, b, arch.hidden)?;
        let (pw, pb) = vars.proj(modality);
        let u = affine_relu(tape, h, pw, pb)?;
        apply_dropout(tape, u, ctx)
    };
    let u_a = encode(&batch.x_audio, 0, tape, ctx)?;
    let u_v = encode(&batch.x_visual, 1, tape, ctx)?;
    Ok((u_a, u_v))
}

/// Project `u_m` into the specific and invariant subspaces and reconstruct
/// through the shared decoder.
pub fn project_subspaces(
    tape: &mut Tape,
    vars: &ModelVars,
    u_a: Var,
    u_v: Var,
) -> Result<SubspaceReps, ModelError> {
    let spec = |tape: &mut Tape, m: usize, u: Var| -> Result<Option<Var>, TapeError> {
        match vars.spec(m) {
            Some((w, b)) => Ok(Some(affine_relu(tape, u, w, b)?)),
            None => Ok(None),
        }
    };
    let h_a = spec(tape, 0, u_a)?;
    let h_v = spec(tape, 1, u_v)?;
    let (g_a, g_v) = match vars.shared_enc() {
        Some((w, b)) => (
            Some(affine_relu(tape, u_a, w, b)?),
            Some(affine_relu(tape, u_v, w, b)?),
        ),
        None => (None, None),
    };
    let (dw, db) = vars.decoder();
    let recon = |tape: &mut Tape, h: Option<Var>, g: Option<Var>| -> Result<Var, TapeError> {
        let sum = match (h, g) {
            (Some(h), Some(g)) => tape.add(h, g)?,
            (Some(h), None) => h,
            (None, Some(g)) => g,
            (None, None) => unreachable!("at least one subspace always exists"),
        };
        affine_relu(tape, sum, dw, db)
    };
    let recon_a = recon(tape, h_a, g_a)?;
    let recon_v = recon(tape, h_v, g_v)?;
    Ok(SubspaceReps {
        u_a,
        u_v,
        h_a,
        h_v,
        g_a,
        g_v,
        recon_a,
        recon_v,
    })
}

/// Fused joint vector plus the attention weight matrices (one `[B x S]`
/// row-stochastic tensor per head and stack row).
pub struct AttentionOut {
    pub fused: Var,
    pub weights: Vec<Var>,
}

impl SubspaceReps {
    /// Representations stacked for fusion, in the fixed row order
    /// `[h_a, h_v, g_a, g_v]` (ablated modes keep their two rows).
    pub fn stack(&self) -> Vec<Var> {
        [self.h_a, self.h_v, self.g_a, self.g_v]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Multi-head self-attention over the stacked representations followed by
/// row concatenation into the joint vector `[B x S*d]`.
pub fn attention_fuse(
    tape: &mut Tape,
    vars: &ModelVars,
    reps: &SubspaceReps,
) -> Result<AttentionOut, ModelError> {
    let arch = &vars.arch;
    if arch.hidden % arch.heads != 0 {
        return Err(ModelError::HeadCount {
            hidden: arch.hidden,
            heads: arch.heads,
        });
    }
    let stack = reps.stack();
    let rows = stack.len();
    let dk = arch.hidden / arch.heads;
    let scale = 1.0 / (dk as f64).sqrt();

    // Per row of the stack: the concatenated head outputs.
    let mut row_heads: Vec<Vec<Var>> = vec![Vec::with_capacity(arch.heads); rows];
    let mut weights = Vec::with_capacity(arch.heads * rows);
    for head in 0..arch.heads {
        let (w_q, w_k, w_v) = vars.attn_head(head);
        let q: Vec<Var> = stack
            .iter()
            .map(|&r| tape.matmul(r, w_q))
            .collect::<Result<_, _>>()?;
        let k: Vec<Var> = stack
            .iter()
            .map(|&r| tape.matmul(r, w_k))
            .collect::<Result<_, _>>()?;
        let v: Vec<Var> = stack
            .iter()
            .map(|&r| tape.matmul(r, w_v))
            .collect::<Result<_, _>>()?;
        for r in 0..rows {
            let mut scores = Vec::with_capacity(rows);
            for c in 0..rows {
                let prod = tape.mul(q[r], k[c])?;
                let dot = tape.row_sum(prod)?;
                scores.push(tape.scale(dot, scale));
            }
            let score_row = tape.concat(1, &scores)?;
            let w = tape.softmax_rows(score_row)?;
            weights.push(w);
            let mut acc: Option<Var> = None;
            for (c, &vc) in v.iter().enumerate() {
                let wc = tape.slice_cols(w, c, 1)?;
                let contrib = tape.mul_col(vc, wc)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, contrib)?,
                    None => contrib,
                });
            }
            row_heads[r].push(acc.expect("rows >= 1"));
        }
    }
    let w_o = vars.w_o();
    let mut fused_rows = Vec::with_capacity(rows);
    for heads in &row_heads {
        let cat = tape.concat(1, heads)?;
        fused_rows.push(tape.matmul(cat, w_o)?);
    }
    let fused = tape.concat(1, &fused_rows)?;
    Ok(AttentionOut { fused, weights })
}

/// Dense prediction head: two ReLU layers with dropout, then a sigmoid
/// per-sequence fake probability `[B x 1]`.
pub fn predict(
    tape: &mut Tape,
    vars: &ModelVars,
    h_out: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var, ModelError> {
    let [(w1, b1), (w2, b2), (w3, b3)] = vars.head();
    let h = affine_relu(tape, h_out, w1, b1)?;
    let h = apply_dropout(tape, h, ctx)?;
    let h = affine_relu(tape, h, w2, b2)?;
    let h = apply_dropout(tape, h, ctx)?;
    let z = tape.matmul(h, w3)?;
    let z = tape.add_row(z, b3)?;
    Ok(tape.sigmoid(z))
}

/// Whole-network forward pass for one batch.
pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &SequenceBatch,
    ctx: &mut ForwardCtx,
) -> Result<(SubspaceReps, AttentionOut, Var), ModelError> {
    let (u_a, u_v) = encode_sequences(tape, vars, batch, ctx)?;
    let reps = project_subspaces(tape, vars, u_a, u_v)?;
    let attn = attention_fuse(tape, vars, &reps)?;
    let y_hat = predict(tape, vars, attn.fused, ctx)?;
    Ok((reps, attn, y_hat))
}

/// Average per-sequence scores into one score per video.
pub fn predict_video(sequence_scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (id, s) in sequence_scores {
        let e = groups.entry(id.as_str()).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|(id, (sum, n))| (id.to_string(), sum / n as f64))
        .collect()
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"AVDDCKPT";
const CKPT_VERSION: u32 = 1;

/// Serialize the parameters as a versioned binary blob: header with the
/// architecture, then the named tensors in canonical order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let a = &params.arch;
    for v in [a.d_audio, a.d_visual, a.hidden, a.heads, a.head_hidden] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(a.subspace_mode.code());
    let named = params.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *at + n > bytes.len() {
            return Err(ModelError::BadCheckpoint("unexpected end of file".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 8)? != CKPT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    }
    let mode = SubspaceMode::from_code(take(&mut at, 1)?[0])
        .ok_or_else(|| ModelError::BadCheckpoint("unknown subspace mode".into()))?;
    let arch = ModelArch {
        d_audio: dims[0],
        d_visual: dims[1],
        hidden: dims[2],
        heads: dims[3],
        head_hidden: dims[4],
        subspace_mode: mode,
    };
    // Build a skeleton with the right structure, then overwrite every tensor.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(arch.clone(), &mut rng)
        .map_err(|e| ModelError::BadCheckpoint(format!("invalid architecture: {e}")))?;
    let n = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let expected_names: Vec<String> = params
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    if n != expected_names.len() {
        return Err(ModelError::BadCheckpoint(format!(
            "expected {} tensors, checkpoint has {n}",
            expected_names.len()
        )));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(n);
    for expected in &expected_names {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| ModelError::BadCheckpoint("non-utf8 tensor name".into()))?;
        if &name != expected {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor order mismatch: expected {expected}, found {name}"
            )));
        }
        let ndim = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut at, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(
            Tensor::new(shape, data)
                .map_err(|e| ModelError::BadCheckpoint(format!("tensor {name}: {e}")))?,
        );
    }
    if at != bytes.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    for (slot, val) in params.tensors_mut().into_iter().zip(loaded) {
        if slot.shape() != val.shape() {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor shape {:?} does not match architecture {:?}",
                val.shape(),
                slot.shape()
            )));
        }
        *slot = val;
    }
    Ok(params)
}

/// Reject a checkpoint whose architecture differs from what the caller
/// expects (e.g. the dataset dimensions or the configured model size).
pub fn check_arch(params: &ModelParams, expected: &ModelArch) -> Result<(), ModelError> {
    if &params.arch != expected {
        return Err(ModelError::ArchMismatch {
            expected: expected.describe(),
            got: params.arch.describe(),
        });
    }
    Ok(())
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn small_arch(mode: SubspaceMode) -> ModelArch {
        ModelArch {
            d_audio: 3,
            d_visual: 5,
            hidden: 8,
            heads: 2,
            head_hidden: 16,
            subspace_mode: mode,
        }
    }

    fn small_batch(b: usize, la: usize, lv: usize, seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        SequenceBatch {
            x_audio: t(vec![b, la, 3]),
            x_visual: t(vec![b, lv, 5]),
            labels: (0..b).map(|i| (i % 2) as f64).collect(),
            video_ids: (0..b).map(|i| format!("v{i}")).collect(),
        }
    }

    fn forward_scores(params: &ModelParams, batch: &SequenceBatch) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let (_, _, y) = forward(&mut tape, &vars, batch, &mut ctx).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn zero_input_with_zero_lstm_bias_gives_relu_proj_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        // Zero the LSTM biases (overriding the forget-gate init) and give the
        // projections a recognizable bias.
        for l in [&mut params.lstm_a, &mut params.lstm_v] {
            l.b = Tensor::zeros(vec![1, 32]);
        }
        let bias: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        params.proj_a.b = Tensor::new(vec![1, 8], bias.clone()).unwrap();
        let batch = SequenceBatch {
            x_audio: Tensor::zeros(vec![2, 4, 3]),
            x_visual: Tensor::zeros(vec![2, 4, 5]),
            labels: vec![0.0, 1.0],
            video_ids: vec!["a".into(), "b".into()],
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut r);
        let (u_a, _) = encode_sequences(&mut tape, &vars, &batch, &mut ctx).unwrap();
        let expected: Vec<f64> = bias.iter().map(|&v| v.max(0.0)).collect();
        for row in 0..2 {
            let got = &tape.data(u_a)[row * 8..(row + 1) * 8];
            assert_eq!(got, &expected[..], "row {row}");
        }
    }

    #[test]
    fn single_cell_step_matches_hand_computation() {
        // B = 1, L = 1: the LSTM output must equal one hand-evaluated cell.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        let x: Vec<f64> = vec![0.3, -0.7, 0.2];
        let batch = SequenceBatch {
            x_audio: Tensor::new(vec![1, 1, 3], x.clone()).unwrap(),
            x_visual: Tensor::zeros(vec![1, 1, 5]),
            labels: vec![0.0],
            video_ids: vec!["a".into()],
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let (w_x, w_h, b) = vars.lstm(0);
        let h = lstm_forward(&mut tape, &batch.x_audio, w_x, w_h, b, 8).unwrap();
        let got = tape.data(h).to_vec();

        // Oracle: scalar loops over the gate algebra.
        let sigm = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wx = &params.lstm_a.w_x;
        let bb = &params.lstm_a.b;
        let mut expected = vec![0.0; 8];
        for j in 0..8 {
            let pre = |gate: usize| -> f64 {
                let col = gate * 8 + j;
                let mut s = bb.data()[col];
                for (i, &xi) in x.iter().enumerate() {
                    s += xi * wx.at2(i, col);
                }
                s // h_prev = 0, so w_h contributes nothing
            };
            let i_g = sigm(pre(0));
            let f_g = sigm(pre(1));
            let g_g = pre(2).tanh();
            let o_g = sigm(pre(3));
            let c = f_g * 0.0 + i_g * g_g;
            expected[j] = o_g * c.tanh();
        }
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        let batch = small_batch(3, 4, 2, 21);
        let a = forward_scores(&params, &batch);
        let b = forward_scores(&params, &batch);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn shared_encoder_gives_identical_invariants_for_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let u = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect()).unwrap();
        let u_a = tape.constant(&u);
        let u_v = tape.constant(&u);
        let reps = project_subspaces(&mut tape, &vars, u_a, u_v).unwrap();
        assert_eq!(tape.data(reps.g_a.unwrap()), tape.data(reps.g_v.unwrap()));
        // Specific encoders have distinct parameters, outputs differ in general.
        assert_ne!(tape.data(reps.h_a.unwrap()), tape.data(reps.h_v.unwrap()));
    }

    #[test]
    fn zero_prediction_head_outputs_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        for a in [&mut params.head.fc1, &mut params.head.fc2, &mut params.head.out] {
            a.w = Tensor::zeros(a.w.shape().to_vec());
            a.b = Tensor::zeros(a.b.shape().to_vec());
        }
        let batch = small_batch(4, 3, 2, 33);
        let scores = forward_scores(&params, &batch);
        assert!(scores.iter().all(|&v| v == 0.5), "{scores:?}");
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        let batch = small_batch(3, 4, 2, 5);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut r);
        let (_, attn, _) = forward(&mut tape, &vars, &batch, &mut ctx).unwrap();
        assert_eq!(attn.weights.len(), 2 * 4); // heads x stack rows
        for &w in &attn.weights {
            let (rows, cols) = (tape.shape(w)[0], tape.shape(w)[1]);
            assert_eq!(cols, 4);
            for i in 0..rows {
                let s: f64 = tape.data(w)[i * cols..(i + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_query_key_returns_mean_of_value_projections() {
        // With W_q = W_k = 0 attention is uniform, and with W_o = I each
        // fused row equals the average of the value projections.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut params = ModelParams::init(
            ModelArch {
                heads: 1,
                ..small_arch(SubspaceMode::Full)
            },
            &mut rng,
        )
        .unwrap();
        params.attn.heads[0].w_q = Tensor::zeros(vec![8, 8]);
        params.attn.heads[0].w_k = Tensor::zeros(vec![8, 8]);
        let mut eye = Tensor::zeros(vec![8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        params.attn.w_o = eye;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mut reps_vars = Vec::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..4 {
            let t = Tensor::new(
                vec![2, 8],
                (0..16).map(|_| rng2.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            reps_vars.push(tape.constant(&t));
        }
        let reps = SubspaceReps {
            u_a: reps_vars[0],
            u_v: reps_vars[1],
            h_a: Some(reps_vars[0]),
            h_v: Some(reps_vars[1]),
            g_a: Some(reps_vars[2]),
            g_v: Some(reps_vars[3]),
            recon_a: reps_vars[0],
            recon_v: reps_vars[1],
        };
        let out = attention_fuse(&mut tape, &vars, &reps).unwrap();
        // Expected: mean over the four value projections, same for every row.
        let wv = &params.attn.heads[0].w_v;
        let mut mean = vec![0.0; 2 * 8];
        for &rv in &reps_vars {
            let r = tape.data(rv).to_vec();
            for b in 0..2 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for i in 0..8 {
                        s += r[b * 8 + i] * wv.at2(i, j);
                    }
                    mean[b * 8 + j] += s / 4.0;
                }
            }
        }
        let fused = tape.data(out.fused);
        for row in 0..4 {
            for b in 0..2 {
                for j in 0..8 {
                    let got = fused[b * 32 + row * 8 + j];
                    assert!(
                        (got - mean[b * 8 + j]).abs() < 1e-9,
                        "row {row} b {b} j {j}: {got} vs {}",
                        mean[b * 8 + j]
                    );
                }
            }
        }
    }

    #[test]
    fn head_permutation_with_permuted_output_blocks_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        let batch = small_batch(2, 3, 2, 41);
        let run = |p: &ModelParams| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, false);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx::eval(&mut r);
            let (_, attn, _) = forward(&mut tape, &vars, &batch, &mut ctx).unwrap();
            tape.data(attn.fused).to_vec()
        };
        let base = run(&params);
        // Swap the two heads and swap the corresponding d_k-row blocks of W_o.
        let mut permuted = params.clone();
        permuted.attn.heads.swap(0, 1);
        let dk = 4;
        let mut w_o = permuted.attn.w_o.clone();
        for i in 0..dk {
            for j in 0..8 {
                let a = w_o.at2(i, j);
                let b = w_o.at2(i + dk, j);
                w_o.data_mut()[i * 8 + j] = b;
                w_o.data_mut()[(i + dk) * 8 + j] = a;
            }
        }
        permuted.attn.w_o = w_o;
        let swapped = run(&permuted);
        for (a, b) in base.iter().zip(&swapped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_video_averages_per_video() {
        let scores = vec![
            ("a".to_string(), 0.2),
            ("a".to_string(), 0.4),
            ("a".to_string(), 0.9),
            ("b".to_string(), 0.7),
        ];
        let v = predict_video(&scores);
        assert_eq!(v.len(), 2);
        assert!((v[0].1 - 0.5).abs() < 1e-12);
        assert!((v[1].1 - 0.7).abs() < 1e-12);
        // Permutation invariance.
        let mut rev = scores.clone();
        rev.reverse();
        assert_eq!(predict_video(&rev), v);
    }

    #[test]
    fn checkpoint_roundtrip_and_arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, params.arch);
        for ((n1, t1), (n2, t2)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.data(), t2.data(), "tensor {n1}");
        }
        let other = small_arch(SubspaceMode::SpecificOnly);
        assert!(matches!(
            check_arch(&loaded, &other),
            Err(ModelError::ArchMismatch { .. })
        ));
        // Byte-identical re-save.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn malformed_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(ModelError::BadCheckpoint(_))
        ));
        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&garbage),
            Err(ModelError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn grads_flow_to_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut params = ModelParams::init(small_arch(SubspaceMode::Full), &mut rng).unwrap();
        let batch = small_batch(2, 3, 2, 43);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut r);
        let (_, _, y) = forward(&mut tape, &vars, &batch, &mut ctx).unwrap();
        let loss = tape.sum_squares(y);
        tape.backward(loss).unwrap();
        params.collect_grads(&tape, &vars);
        for (name, t) in params.named_tensors() {
            let g = t.grad().unwrap_or_else(|| panic!("no grad on {name}"));
            assert_eq!(g.len(), t.numel(), "grad shape on {name}");
        }
    }

    #[test]
    fn ablated_modes_shrink_the_stack() {
        for (mode, rows) in [
            (SubspaceMode::SpecificOnly, 2usize),
            (SubspaceMode::InvariantOnly, 2),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            let params = ModelParams::init(small_arch(mode), &mut rng).unwrap();
            let batch = small_batch(2, 3, 2, 47);
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, false);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx::eval(&mut r);
            let (reps, attn, y) = forward(&mut tape, &vars, &batch, &mut ctx).unwrap();
            assert_eq!(reps.stack().len(), rows);
            assert_eq!(tape.shape(attn.fused), &[2, rows * 8]);
            assert_eq!(tape.shape(y), &[2, 1]);
        }
    }
}
