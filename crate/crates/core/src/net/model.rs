//! Forward passes of the state-aware UNet denoiser, the multi-scale
//! convolutional GRU that carries state between denoising steps, and the
//! context embedders.
//!
//! Layout of one denoiser call at scale `i` (0-based, `c_i` channels,
//! `L >> i` positions):
//!
//! ```text
//! encoder: [fuse(concat(h, state_in[i]))] -> res block -> stride-2 conv
//! decoder: upsample -> conv -> concat(skip_i) -> res block  => state_out[i]
//! ```
//!
//! The noise prediction is read off the scale-0 decoder feature.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::net::config::{group_count, ArchConfig, ContextEncoding};
use crate::net::params::{Affine, Embedder, GruCell, ModelParams, Norm, ResBlock};
use crate::tensor::{Real, Tensor};
use crate::traj::{Context, ContextPayload, ConditionTensor};

/// Multi-scale sequential features, one `(c_i, L >> i)` map per UNet scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<F> {
    pub features: Vec<Tensor<F>>,
}

impl<F: Real> HiddenState<F> {
    pub fn zeros(config: &ArchConfig, len: usize) -> Self {
        HiddenState {
            features: (0..config.blocks)
                .map(|i| Tensor::zeros(&[config.channels(i), config.scale_len(i, len)]))
                .collect(),
        }
    }

    /// `(length, channels)` of every scale.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.features.iter().map(|f| (f.dim(1), f.dim(0))).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.features
            .iter()
            .all(|f| f.data().iter().all(|&x| x == F::zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|f| f.is_finite())
    }

    pub fn check(&self, config: &ArchConfig, len: usize) -> Result<()> {
        if self.features.len() != config.blocks {
            return Err(shape(format!(
                "state has {} scales, expected {}",
                self.features.len(),
                config.blocks
            )));
        }
        for (i, f) in self.features.iter().enumerate() {
            let want = [config.channels(i), config.scale_len(i, len)];
            if f.shape() != want {
                return Err(shape(format!("state scale {i} is {:?}, expected {want:?}", f.shape())));
            }
        }
        Ok(())
    }

    /// Records every scale as a constant on `tape`.
    pub fn record(&self, tape: &mut Tape<'_, F>) -> Vec<Var> {
        self.features.iter().map(|f| tape.input(f.clone())).collect()
    }

    pub fn read(tape: &Tape<'_, F>, vars: &[Var]) -> Self {
        HiddenState {
            features: vars.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Sinusoidal encoding of a diffusion step, interleaved as
/// `(sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), ...)` with `ω_k = 10000^(−2k/dim)`.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .flat_map(|k| {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            let phase = t as f64 * freq;
            [phase.sin(), phase.cos()]
        })
        .collect()
}

fn conv<F: Real>(tape: &mut Tape<'_, F>, x: Var, a: Affine, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.conv1d(x, w, b, stride, pad)
}

fn linear<F: Real>(tape: &mut Tape<'_, F>, x: Var, a: Affine) -> Result<Var> {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.linear(x, w, b)
}

fn norm<F: Real>(tape: &mut Tape<'_, F>, x: Var, n: Norm) -> Result<Var> {
    let groups = group_count(tape.shape(x)[0]);
    let (g, b) = (tape.param(n.gamma), tape.param(n.beta));
    tape.group_norm(x, g, b, groups)
}

/// Embeds `t` and applies a learned projection with SiLU.
fn step_features<F: Real>(tape: &mut Tape<'_, F>, t: usize, dim: usize, proj: Affine) -> Result<Var> {
    let raw: Vec<F> = step_embedding(t, dim).into_iter().map(F::lit).collect();
    let v = tape.input(Tensor::from_vec(&[dim], raw)?);
    let h = linear(tape, v, proj)?;
    Ok(tape.silu(h))
}

fn res_block<F: Real>(tape: &mut Tape<'_, F>, x: Var, rb: &ResBlock, step: Var, pad: usize) -> Result<Var> {
    let h = norm(tape, x, rb.gn1)?;
    let h = tape.silu(h);
    let h = conv(tape, h, rb.conv1, 1, pad)?;
    let s = linear(tape, step, rb.step)?;
    let h = tape.add_channels(h, s)?;
    let h = norm(tape, h, rb.gn2)?;
    let h = tape.silu(h);
    let h = conv(tape, h, rb.conv2, 1, pad)?;
    let residual = match rb.skip {
        Some(a) => conv(tape, x, a, 1, 0)?,
        None => x,
    };
    tape.add(h, residual)
}

/// Output of one recorded denoiser call.
pub struct DenoiseVars {
    /// `(2, L)` predicted multi-step noise.
    pub eps: Var,
    /// Decoder feature of every scale: the single-step state.
    pub state: Vec<Var>,
}

/// Records one denoiser call. `cond` is the `(D, L)` conditioning tensor;
/// `state_in` must be given exactly when the model propagates state.
pub fn denoise_on_tape<F: Real>(
    tape: &mut Tape<'_, F>,
    params: &ModelParams<F>,
    cond: Var,
    state_in: Option<&[Var]>,
    t: usize,
) -> Result<DenoiseVars> {
    let cfg = params.config();
    let lay = &params.layout;
    let cs = tape.shape(cond).to_vec();
    if cs.len() != 2 || cs[0] != cfg.input_width() {
        return Err(shape(format!(
            "conditioning tensor {cs:?} does not have {} channels",
            cfg.input_width()
        )));
    }
    let len = cs[1];
    cfg.check_len(len)?;
    if cfg.state_propagation != state_in.is_some() {
        return Err(invalid("state input must be supplied exactly when state propagation is enabled"));
    }
    if let Some(s) = state_in {
        if s.len() != cfg.blocks {
            return Err(shape(format!("state has {} scales, expected {}", s.len(), cfg.blocks)));
        }
        for (i, &v) in s.iter().enumerate() {
            let want = [cfg.channels(i), cfg.scale_len(i, len)];
            if tape.shape(v) != want {
                return Err(shape(format!("state scale {i} is {:?}, expected {want:?}", tape.shape(v))));
            }
        }
    }
    let pad = cfg.pad();
    let step = step_features(tape, t, cfg.step_embed_dim, lay.step)?;

    let mut h = conv(tape, cond, lay.input, 1, pad)?;
    let mut skips = Vec::with_capacity(cfg.blocks);
    for (i, enc) in lay.encoders.iter().enumerate() {
        if let (Some(fuse), Some(s)) = (enc.fuse, state_in) {
            let joined = tape.concat(&[h, s[i]])?;
            h = conv(tape, joined, fuse, 1, 0)?;
        }
        h = res_block(tape, h, &enc.res, step, pad)?;
        skips.push(h);
        if let Some(down) = enc.down {
            h = conv(tape, h, down, 2, pad)?;
        }
    }
    let mut state = vec![h; cfg.blocks];
    for i in (0..cfg.blocks).rev() {
        let dec = &lay.decoders[i];
        if let Some(up) = dec.up {
            let u = tape.upsample2(h)?;
            let u = conv(tape, u, up, 1, pad)?;
            h = tape.concat(&[u, skips[i]])?;
        }
        h = res_block(tape, h, &dec.res, step, pad)?;
        state[i] = h;
    }
    let o = norm(tape, h, lay.out_norm)?;
    let o = tape.silu(o);
    let eps = conv(tape, o, lay.out, 1, pad)?;
    Ok(DenoiseVars { eps, state })
}

/// Records one convolutional GRU cell:
///
/// ```text
/// z  = σ(conv_z([x, h]) + W_z·s)
/// r  = σ(conv_r([x, h]) + W_r·s)
/// n  = tanh(conv_n([x, r⊙h]) + W_n·s)
/// h' = (1 − z)⊙h + z⊙n
/// ```
///
/// with `x` the fresh single-step feature, `h` the carried multi-step
/// feature and `s` the step features.
fn gru_cell<F: Real>(tape: &mut Tape<'_, F>, cell: &GruCell, x: Var, h: Var, step: Var, pad: usize) -> Result<Var> {
    let xh = tape.concat(&[x, h])?;
    let zc = conv(tape, xh, cell.z, 1, pad)?;
    let zs = linear(tape, step, cell.step_z)?;
    let zp = tape.add_channels(zc, zs)?;
    let z = tape.sigmoid(zp);
    let rc = conv(tape, xh, cell.r, 1, pad)?;
    let rs = linear(tape, step, cell.step_r)?;
    let rp = tape.add_channels(rc, rs)?;
    let r = tape.sigmoid(rp);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh])?;
    let nc = conv(tape, xrh, cell.n, 1, pad)?;
    let ns = linear(tape, step, cell.step_n)?;
    let np = tape.add_channels(nc, ns)?;
    let n = tape.tanh(np);
    let keep = tape.one_minus(z);
    let carried = tape.mul(keep, h)?;
    let fresh = tape.mul(z, n)?;
    tape.add(carried, fresh)
}

/// Records the multi-scale state update `h̄_{t−1} = MCGRU(h̄_t, h_{t−1}, t)`.
pub fn propagate_on_tape<F: Real>(
    tape: &mut Tape<'_, F>,
    params: &ModelParams<F>,
    state_multi: &[Var],
    state_single: &[Var],
    t: usize,
) -> Result<Vec<Var>> {
    let cfg = params.config();
    let lay = &params.layout;
    let gru_step = lay
        .gru_step
        .ok_or_else(|| invalid("model was built without state propagation"))?;
    if state_multi.len() != cfg.blocks || state_single.len() != cfg.blocks {
        return Err(shape("state scale count mismatch"));
    }
    for (&a, &b) in state_multi.iter().zip(state_single) {
        if tape.shape(a) != tape.shape(b) {
            return Err(shape(format!(
                "state scales differ: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
    }
    let step = step_features(tape, t, cfg.step_embed_dim, gru_step)?;
    let pad = cfg.pad();
    lay.gru
        .iter()
        .enumerate()
        .map(|(i, cell)| gru_cell(tape, cell, state_single[i], state_multi[i], step, pad))
        .collect()
}

/// Records the `(d_i, L)` embedding of every configured context, in
/// configuration order.
pub fn embed_contexts_on_tape<F: Real>(
    tape: &mut Tape<'_, F>,
    params: &ModelParams<F>,
    contexts: &[Context],
    len: usize,
) -> Result<Vec<Var>> {
    let cfg = params.config();
    for c in contexts {
        if !cfg.contexts.iter().any(|s| s.kind == c.kind) {
            return Err(invalid(format!("context kind {} is not registered", c.kind.label())));
        }
    }
    cfg.contexts
        .iter()
        .zip(&params.layout.embedders)
        .map(|(spec, emb)| {
            let ctx = contexts
                .iter()
                .find(|c| c.kind == spec.kind)
                .ok_or_else(|| invalid(format!("context {} missing from task", spec.kind.label())))?;
            let v = match (emb, &spec.encoding, &ctx.payload) {
                (Embedder::Table { table }, ContextEncoding::Categorical { vocab }, ContextPayload::Categorical(idx)) => {
                    if idx >= vocab {
                        return Err(invalid(format!(
                            "context {} index {idx} outside table of {vocab}",
                            spec.kind.label()
                        )));
                    }
                    let t = tape.param(*table);
                    tape.row(t, *idx)?
                }
                (Embedder::Affine(a), ContextEncoding::Scalar, ContextPayload::Scalar(x)) => {
                    let x = tape.input(Tensor::from_vec(&[1], vec![F::lit(*x)])?);
                    linear(tape, x, *a)?
                }
                (Embedder::Affine(a), ContextEncoding::Vector { width }, ContextPayload::Vector(xs)) if xs.len() == *width => {
                    let x = tape.input(Tensor::from_vec(&[*width], xs.iter().map(|&v| F::lit(v)).collect())?);
                    linear(tape, x, *a)?
                }
                _ => {
                    return Err(invalid(format!(
                        "context {} payload does not match its encoding",
                        spec.kind.label()
                    )))
                }
            };
            tape.broadcast(v, len)
        })
        .collect()
}

/// Transposes the `L × D` conditioning tensor into the channel-major layout.
pub fn condition_channels<F: Real>(cond: &ConditionTensor) -> Tensor<F> {
    let (len, width) = (cond.len, cond.width);
    Tensor::from_fn(&[width, len], |i| F::lit(cond.data[(i % len) * width + i / len]))
}

/// `(Σ d_i, L)` embedding channels of every configured context, stacked in
/// configuration order. Computed once per task since contexts are constant
/// over the denoising chain.
pub fn context_channels<F: Real>(params: &ModelParams<F>, contexts: &[Context], len: usize) -> Result<Tensor<F>> {
    let mut tape = Tape::new(params.tensors());
    let vars = embed_contexts_on_tape(&mut tape, params, contexts, len)?;
    let parts: Vec<&Tensor<F>> = vars.iter().map(|&v| tape.value(v)).collect();
    stack_channels(&parts, len)
}

/// Concatenates `(c_k, len)` tensors along the channel axis.
pub fn stack_channels<F: Real>(parts: &[&Tensor<F>], len: usize) -> Result<Tensor<F>> {
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        if p.shape().len() != 2 || p.dim(1) != len {
            return Err(shape(format!("cannot stack {:?} at length {len}", p.shape())));
        }
        data.extend_from_slice(p.data());
        c += p.dim(0);
    }
    Tensor::from_vec(&[c, len], data)
}

/// Result of a stand-alone denoiser call.
#[derive(Clone, Debug)]
pub struct DenoiseOutput<F> {
    /// `(2, L)` channel-major noise prediction.
    pub eps: Tensor<F>,
    /// Single-step state `h_{t−1}`.
    pub state: HiddenState<F>,
}

/// One denoiser evaluation on a fully assembled conditioning tensor
/// (embeddings already included). `state_in` is ignored by models without
/// state propagation.
pub fn denoise_forward<F: Real>(
    params: &ModelParams<F>,
    cond: &ConditionTensor,
    state_in: &HiddenState<F>,
    t: usize,
) -> Result<DenoiseOutput<F>> {
    denoise_channels(params, condition_channels(cond), state_in, t)
}

/// [`denoise_forward`] on a channel-major `(D, L)` input.
pub fn denoise_channels<F: Real>(
    params: &ModelParams<F>,
    input: Tensor<F>,
    state_in: &HiddenState<F>,
    t: usize,
) -> Result<DenoiseOutput<F>> {
    if input.shape().len() != 2 {
        return Err(shape(format!("conditioning tensor {:?} is not two-dimensional", input.shape())));
    }
    let len = input.dim(1);
    let mut tape = Tape::new(params.tensors());
    let a = tape.input(input);
    let out = if params.config().state_propagation {
        state_in.check(params.config(), len)?;
        let s = state_in.record(&mut tape);
        denoise_on_tape(&mut tape, params, a, Some(&s), t)?
    } else {
        denoise_on_tape(&mut tape, params, a, None, t)?
    };
    let eps = tape.value(out.eps).clone();
    let state = HiddenState::read(&tape, &out.state);
    if !eps.is_finite() || !state.is_finite() {
        return Err(Error::NonFinite("denoiser activations".into()));
    }
    Ok(DenoiseOutput { eps, state })
}

/// Stand-alone state update.
pub fn propagate_state<F: Real>(
    params: &ModelParams<F>,
    state_multi: &HiddenState<F>,
    state_single: &HiddenState<F>,
    t: usize,
) -> Result<HiddenState<F>> {
    let mut tape = Tape::new(params.tensors());
    let m = state_multi.record(&mut tape);
    let s = state_single.record(&mut tape);
    let out = propagate_on_tape(&mut tape, params, &m, &s, t)?;
    let state = HiddenState::read(&tape, &out);
    if !state.is_finite() {
        return Err(Error::NonFinite("state propagation".into()));
    }
    Ok(state)
}

/// Stand-alone context embedding: `(d, L)` for the configured context of
/// `ctx.kind`.
pub fn embed_context<F: Real>(params: &ModelParams<F>, ctx: &Context, len: usize) -> Result<Tensor<F>> {
    let cfg = params.config();
    let pos = cfg
        .contexts
        .iter()
        .position(|s| s.kind == ctx.kind)
        .ok_or_else(|| invalid(format!("context kind {} is not registered", ctx.kind.label())))?;
    // Embed just this one context through a single-entry view of the config.
    let mut tape = Tape::new(params.tensors());
    let spec = &cfg.contexts[pos];
    let emb = &params.layout.embedders[pos];
    let v = match (emb, &spec.encoding, &ctx.payload) {
        (Embedder::Table { table }, ContextEncoding::Categorical { vocab }, ContextPayload::Categorical(i)) if i < vocab => {
            let t = tape.param(*table);
            tape.row(t, *i)?
        }
        (Embedder::Affine(a), ContextEncoding::Scalar, ContextPayload::Scalar(x)) => {
            let x = tape.input(Tensor::from_vec(&[1], vec![F::lit(*x)])?);
            linear(&mut tape, x, *a)?
        }
        (Embedder::Affine(a), ContextEncoding::Vector { width }, ContextPayload::Vector(xs)) if xs.len() == *width => {
            let x = tape.input(Tensor::from_vec(&[*width], xs.iter().map(|&v| F::lit(v)).collect())?);
            linear(&mut tape, x, *a)?
        }
        _ => return Err(invalid(format!("context {} payload does not match its encoding", ctx.kind.label()))),
    };
    let b = tape.broadcast(v, len)?;
    Ok(tape.value(b).clone())
}
