//! Graph construction for the encoder and decoder stacks.

use super::config::ModelConfig;
use super::params::{BlockIds, Layout, LstmIds};
use crate::error::{PaeError, Result};
use crate::numerics::{Graph, NodeId};
use crate::rng::Stream;

/// Parameters bound into one graph, indexed like the store.
pub struct Bound<'l> {
    pub cfg: &'l ModelConfig,
    pub layout: &'l Layout,
    pub nodes: Vec<NodeId>,
}

impl Bound<'_> {
    fn p(&self, idx: usize) -> NodeId {
        self.nodes[idx]
    }
}

pub struct BlockOutput {
    pub out: NodeId,
    /// Per-head attention matrices.
    pub attention: Vec<NodeId>,
}

fn ensure_finite(g: &Graph<'_>, id: NodeId, stage: &str) -> Result<()> {
    if g.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PaeError::Numeric { stage: stage.into() })
    }
}

/// Pre-norm residual block: `x + MSA(LN(x))`, then `x' + MLP(LN(x'))`.
/// Dropout sits inside the MLP only.
pub fn transformer_block(
    g: &mut Graph<'_>,
    b: &Bound<'_>,
    blk: &BlockIds,
    x: NodeId,
    training: bool,
    rng: &mut Stream,
) -> Result<BlockOutput> {
    let cfg = b.cfg;
    let dh = cfg.head_dim();
    let eps = cfg.layer_norm_eps;

    let h = g.layer_norm(x, b.p(blk.ln1_gamma), b.p(blk.ln1_beta), eps)?;
    let qkv = g.matmul(h, b.p(blk.qkv))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let base = head * 3 * dh;
        let q = g.slice_cols(qkv, base, dh)?;
        let k = g.slice_cols(qkv, base + dh, dh)?;
        let v = g.slice_cols(qkv, base + 2 * dh, dh)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores);
        attention.push(a);
        heads.push(g.matmul(a, v)?);
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let msa = g.matmul(concat, b.p(blk.proj))?;
    let x1 = g.add(x, msa)?;

    let h2 = g.layer_norm(x1, b.p(blk.ln2_gamma), b.p(blk.ln2_beta), eps)?;
    let f = g.affine(h2, b.p(blk.fc1_weight), b.p(blk.fc1_bias))?;
    let f = g.gelu(f);
    let f = g.dropout(f, cfg.dropout, rng, training)?;
    let f = g.affine(f, b.p(blk.fc2_weight), b.p(blk.fc2_bias))?;
    let f = g.dropout(f, cfg.dropout, rng, training)?;
    let out = g.add(x1, f)?;
    Ok(BlockOutput { out, attention })
}

/// Runs the LSTM from the last row of `x` up to row 0 (the class token)
/// with zero initial state and returns the final cell state `[1 × H]`.
pub fn lstm_compress(g: &mut Graph<'_>, b: &Bound<'_>, ids: &LstmIds, x: NodeId) -> Result<NodeId> {
    let hidden = b.cfg.lstm_hidden;
    let rows = g.shape(x)[0];
    let xw = g.matmul(x, b.p(ids.w_ih))?;
    let bias = g.add(b.p(ids.b_ih), b.p(ids.b_hh))?;
    let mut h: Option<NodeId> = None;
    let mut c: Option<NodeId> = None;
    for step in 0..rows {
        let row = rows - 1 - step;
        let xr = g.slice_rows(xw, row, 1)?;
        let mut pre = g.add_row(xr, bias)?;
        if let Some(h_prev) = h {
            let hw = g.matmul(h_prev, b.p(ids.w_hh))?;
            pre = g.add(pre, hw)?;
        }
        let i_gate = g.slice_cols(pre, 0, hidden)?;
        let i_gate = g.sigmoid(i_gate);
        let g_gate = g.slice_cols(pre, 2 * hidden, hidden)?;
        let g_gate = g.tanh(g_gate);
        let ig = g.mul(i_gate, g_gate)?;
        let c_new = match c {
            Some(c_prev) => {
                let f_gate = g.slice_cols(pre, hidden, hidden)?;
                let f_gate = g.sigmoid(f_gate);
                let fc = g.mul(f_gate, c_prev)?;
                g.add(fc, ig)?
            }
            None => ig,
        };
        c = Some(c_new);
        if step + 1 < rows {
            let o_gate = g.slice_cols(pre, 3 * hidden, hidden)?;
            let o_gate = g.sigmoid(o_gate);
            let tc = g.tanh(c_new);
            h = Some(g.mul(o_gate, tc)?);
        }
    }
    Ok(c.expect("at least one row"))
}

/// Class token plus learnable positions: `[x_class; xp] + E_pos`.
pub fn embed(g: &mut Graph<'_>, b: &Bound<'_>, patches: NodeId) -> Result<NodeId> {
    let with_class = g.concat_rows(&[b.p(b.layout.class_token), patches])?;
    g.add(with_class, b.p(b.layout.pos_embedding))
}

pub struct EncoderOutput {
    pub latent: NodeId,
    /// Encoder-stack output row 0, copied to the decoder.
    pub class_row: NodeId,
    pub attention: Vec<NodeId>,
}

/// `patches` is the already-masked `[N × D]` token matrix.
pub fn encode(g: &mut Graph<'_>, b: &Bound<'_>, patches: NodeId, training: bool, rng: &mut Stream) -> Result<EncoderOutput> {
    let mut x = embed(g, b, patches)?;
    let mut attention = Vec::new();
    for blk in &b.layout.encoder {
        let out = transformer_block(g, b, blk, x, training, rng)?;
        x = out.out;
        attention.extend(out.attention);
    }
    ensure_finite(g, x, "encoder transformer stack")?;
    let class_row = g.slice_rows(x, 0, 1)?;
    let c = lstm_compress(g, b, &b.layout.lstm, x)?;
    ensure_finite(g, c, "lstm compression")?;

    let [(w1, b1), (w2, b2), (w3, b3)] = b.layout.head;
    let z = g.affine(c, b.p(w1), b.p(b1))?;
    let z = g.gelu(z);
    let z = g.affine(z, b.p(w2), b.p(b2))?;
    let z = g.gelu(z);
    let latent = g.affine(z, b.p(w3), b.p(b3))?;
    ensure_finite(g, latent, "latent head")?;
    Ok(EncoderOutput {
        latent,
        class_row,
        attention,
    })
}

/// Latent expansion, class-row copy, decoder stack, and depatchify to
/// `[channels × samples]`.
pub fn decode(
    g: &mut Graph<'_>,
    b: &Bound<'_>,
    latent: NodeId,
    class_row: NodeId,
    training: bool,
    rng: &mut Stream,
) -> Result<NodeId> {
    let cfg = b.cfg;
    let (n, d) = (cfg.tokens(), cfg.patch_len());
    let e = g.affine(latent, b.p(b.layout.expand_weight), b.p(b.layout.expand_bias))?;
    let e = g.reshape(e, &[n, d])?;
    let mut x = g.concat_rows(&[class_row, e])?;
    for blk in &b.layout.decoder {
        x = transformer_block(g, b, blk, x, training, rng)?.out;
    }
    ensure_finite(g, x, "decoder transformer stack")?;
    let tokens = g.slice_rows(x, 1, n)?;
    g.reshape(tokens, &[cfg.channels, cfg.samples])
}
