//! Tape-level building blocks shared by the recommender and the
//! embedding-inference function.

use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;

use super::{ModelConfig, ModelError, Token, Variant};

/// Non-pad rows of an embedded sequence plus the number of leading pad
/// slots that were skipped. Pad slots never take part in attention or
/// recurrence, so they are not materialized on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub rows: Var,
    pub pad: usize,
}

/// Per-call switches.
pub struct Pass<'a> {
    pub training: bool,
    pub rng: &'a mut Rng,
}

/// Item lookup, positional embedding (transformer), layer norm and dropout
/// for a sequence left-padded to `total_len` slots.
pub fn embed_sequence(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    n_items: usize,
    tokens: &[Token],
    total_len: usize,
    pass: &mut Pass<'_>,
) -> Result<Embedded, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Input("empty sequence".into()));
    }
    if tokens.len() > total_len {
        return Err(ModelError::Input(format!("sequence of {} exceeds {total_len} slots", tokens.len())));
    }
    let idx = token_rows(tokens, n_items)?;
    let table = tape.param_named(params, "emb.items")?;
    let mut x = tape.gather_rows(table, &idx)?;
    let pad = total_len - tokens.len();
    if cfg.variant == Variant::Transformer {
        let pos = tape.param_named(params, "emb.pos")?;
        let n_pos = tape.shape(pos)[0];
        if total_len > n_pos {
            return Err(ModelError::Input(format!("{total_len} slots but {n_pos} positions")));
        }
        let slots: Vec<usize> = (pad..total_len).collect();
        let p = tape.gather_rows(pos, &slots)?;
        x = tape.add(x, p)?;
    }
    let g = tape.param_named(params, "emb.ln.gain")?;
    let b = tape.param_named(params, "emb.ln.bias")?;
    x = tape.layer_norm(x, g, b, cfg.ln_eps)?;
    x = tape.dropout(x, cfg.dropout, pass.training, pass.rng)?;
    Ok(Embedded { rows: x, pad })
}

pub(crate) fn token_rows(tokens: &[Token], n_items: usize) -> Result<Vec<usize>, ModelError> {
    tokens
        .iter()
        .map(|t| match *t {
            Token::Item(i) if i < n_items => Ok(i),
            Token::Item(i) => Err(ModelError::Index { index: i, n_items }),
            Token::Mask => Ok(n_items + 1),
        })
        .collect()
}

fn linear(tape: &mut Tape, params: &ParamSet, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
    let wv = tape.param_named(params, w)?;
    let bv = tape.param_named(params, b)?;
    let y = tape.matmul(x, wv)?;
    Ok(tape.add_row_bias(y, bv)?)
}

/// Multi-head self-attention without masking over the rows of `x`.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, ModelError> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(ModelError::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let q = linear(tape, params, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(tape, params, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(tape, params, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let att = tape.softmax_rows(logits);
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, params, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Position-wise feed-forward with GELU.
pub fn feed_forward(tape: &mut Tape, params: &ParamSet, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = linear(tape, params, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = tape.gelu(h);
    linear(tape, params, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// One self-attention block:
/// `A = LN(H + Dropout(MHA(H)))`, `H' = LN(A + Dropout(PWFF(A)))`.
pub fn attention_block(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    heads: usize,
    dropout: f64,
    eps: f64,
    pass: &mut Pass<'_>,
) -> Result<(Var, Var), ModelError> {
    let att = multi_head_attention(tape, params, &format!("{prefix}.att"), x, heads)?;
    let att = tape.dropout(att, dropout, pass.training, pass.rng)?;
    let res = tape.add(x, att)?;
    let g1 = tape.param_named(params, &format!("{prefix}.ln1.gain"))?;
    let b1 = tape.param_named(params, &format!("{prefix}.ln1.bias"))?;
    let a = tape.layer_norm(res, g1, b1, eps)?;
    let ff = feed_forward(tape, params, &format!("{prefix}.ff"), a)?;
    let ff = tape.dropout(ff, dropout, pass.training, pass.rng)?;
    let res = tape.add(a, ff)?;
    let g2 = tape.param_named(params, &format!("{prefix}.ln2.gain"))?;
    let b2 = tape.param_named(params, &format!("{prefix}.ln2.bias"))?;
    let h = tape.layer_norm(res, g2, b2, eps)?;
    Ok((a, h))
}

/// Hidden states after every transformer block: returns `(A, H)` lists
/// where `H[0]` is the input.
pub fn transformer_stack(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    input: Var,
    pass: &mut Pass<'_>,
) -> Result<(Vec<Var>, Vec<Var>), ModelError> {
    let mut hs = vec![input];
    let mut as_ = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let (a, h) =
            attention_block(tape, params, &format!("enc.b{b}"), hs[b], cfg.heads, cfg.dropout, cfg.ln_eps, pass)?;
        as_.push(a);
        hs.push(h);
    }
    Ok((as_, hs))
}

/// `GELU(h·W + b)`, mapping final hidden rows to user states.
pub fn output_head(tape: &mut Tape, params: &ParamSet, rows: Var) -> Result<Var, ModelError> {
    let y = linear(tape, params, rows, "enc.out.w", "enc.out.b")?;
    Ok(tape.gelu(y))
}

/// GRU over the rows of `x`, starting from a zero state:
/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `ĥ = tanh(xWh + (r⊙h)Uh + bh)`, `h' = (1−z)⊙h + z⊙ĥ`.
/// Returns all hidden states stacked (`T×d`).
pub fn gru_states(tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, ModelError> {
    let (t_len, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let xw = linear(tape, params, x, "enc.gru.wx", "enc.gru.bx")?;
    let uzr = tape.param_named(params, "enc.gru.uzr")?;
    let uh = tape.param_named(params, "enc.gru.uh")?;
    let mut h = tape.constant(Tensor::zeros(&[1, d]));
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = tape.slice_rows(xw, t, 1)?;
        let hu = tape.matmul(h, uzr)?;
        let xz = tape.slice_cols(xt, 0, d)?;
        let xr = tape.slice_cols(xt, d, d)?;
        let xh = tape.slice_cols(xt, 2 * d, d)?;
        let hz = tape.slice_cols(hu, 0, d)?;
        let hr = tape.slice_cols(hu, d, d)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, uh)?;
        let c = tape.add(xh, rhu)?;
        let c = tape.tanh(c);
        let delta = tape.sub(c, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        states.push(h);
    }
    Ok(tape.concat_rows(&states)?)
}

/// Relevance rows `M·Eᵀ + bias` against the real-item rows of the shared
/// embedding table.
pub fn score_rows(tape: &mut Tape, params: &ParamSet, n_items: usize, states: Var) -> Result<Var, ModelError> {
    let table = tape.param_named(params, "emb.items")?;
    let items = tape.slice_rows(table, 0, n_items)?;
    let bias = tape.param_named(params, "emb.bias")?;
    let s = tape.matmul_nt(states, items)?;
    Ok(tape.add_row_bias(s, bias)?)
}
