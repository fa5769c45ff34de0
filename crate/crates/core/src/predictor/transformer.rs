//! Tiny bidirectional transformer with hand-written backpropagation.
//!
//! Pre-norm blocks: `x + attn(ln1(x))` then `x + ffn(ln2(x))`, learned
//! absolute positions, additive role embeddings, and a masked multi-head
//! attention whose blocked pairs receive exactly zero weight (softmax runs
//! over the allowed key set only). Everything is f64 so central finite
//! differences can resolve the analytic gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{PredictionGrid, PredictorInput};
use crate::conversation::Role;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Tensor, // 1 x d
    pub bias: Tensor, // 1 x d
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::full(1, d, 1.0),
            bias: Tensor::zeros(1, d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: self.gain.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: LayerNormParams,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl BlockParams {
    fn init<R: Rng>(d: usize, d_ff: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            ln1: LayerNormParams::init(d),
            wq: Tensor::uniform(d, d, scale, rng),
            bq: Tensor::zeros(1, d),
            wk: Tensor::uniform(d, d, scale, rng),
            bk: Tensor::zeros(1, d),
            wv: Tensor::uniform(d, d, scale, rng),
            bv: Tensor::zeros(1, d),
            wo: Tensor::uniform(d, d, scale, rng),
            bo: Tensor::zeros(1, d),
            ln2: LayerNormParams::init(d),
            fc1_w: Tensor::uniform(d, d_ff, scale, rng),
            fc1_b: Tensor::zeros(1, d_ff),
            fc2_w: Tensor::uniform(d_ff, d, scale, rng),
            fc2_b: Tensor::zeros(1, d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            wq: self.wq.zeros_like(),
            bq: self.bq.zeros_like(),
            wk: self.wk.zeros_like(),
            bk: self.bk.zeros_like(),
            wv: self.wv.zeros_like(),
            bv: self.bv.zeros_like(),
            wo: self.wo.zeros_like(),
            bo: self.bo.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1_w: self.fc1_w.zeros_like(),
            fc1_b: self.fc1_b.zeros_like(),
            fc2_w: self.fc2_w.zeros_like(),
            fc2_b: self.fc2_b.zeros_like(),
        }
    }
}

/// All transformer parameters plus the head count they are shaped for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub n_heads: usize,
    /// Embedding row used for masked positions (the MASK id).
    pub mask_row: usize,
    pub tok_emb: Tensor,  // total_vocab x d
    pub pos_emb: Tensor,  // max_len x d
    pub role_emb: Tensor, // 3 x d
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    pub out_w: Tensor, // d x out_width
    pub out_b: Tensor, // 1 x out_width
}

impl TransformerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        total_vocab: usize,
        out_width: usize,
        mask_row: usize,
        d: usize,
        n_heads: usize,
        n_blocks: usize,
        d_ff: usize,
        max_len: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            n_heads,
            mask_row,
            tok_emb: Tensor::uniform(total_vocab, d, scale, rng),
            pos_emb: Tensor::uniform(max_len, d, scale, rng),
            role_emb: Tensor::uniform(3, d, scale, rng),
            blocks: (0..n_blocks)
                .map(|_| BlockParams::init(d, d_ff, scale, rng))
                .collect(),
            ln_f: LayerNormParams::init(d),
            out_w: Tensor::uniform(d, out_width, scale, rng),
            out_b: Tensor::zeros(1, out_width),
        })
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.cols
    }

    pub fn out_width(&self) -> usize {
        self.out_w.cols
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.rows
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            n_heads: self.n_heads,
            mask_row: self.mask_row,
            tok_emb: self.tok_emb.zeros_like(),
            pos_emb: self.pos_emb.zeros_like(),
            role_emb: self.role_emb.zeros_like(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            ln_f: self.ln_f.zeros_like(),
            out_w: self.out_w.zeros_like(),
            out_b: self.out_b.zeros_like(),
        }
    }

    pub fn tensor_views(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("role_emb".into(), &self.role_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.ln1.gain"), &b.ln1.gain));
            v.push((format!("block{i}.ln1.bias"), &b.ln1.bias));
            v.push((format!("block{i}.wq"), &b.wq));
            v.push((format!("block{i}.bq"), &b.bq));
            v.push((format!("block{i}.wk"), &b.wk));
            v.push((format!("block{i}.bk"), &b.bk));
            v.push((format!("block{i}.wv"), &b.wv));
            v.push((format!("block{i}.bv"), &b.bv));
            v.push((format!("block{i}.wo"), &b.wo));
            v.push((format!("block{i}.bo"), &b.bo));
            v.push((format!("block{i}.ln2.gain"), &b.ln2.gain));
            v.push((format!("block{i}.ln2.bias"), &b.ln2.bias));
            v.push((format!("block{i}.fc1.w"), &b.fc1_w));
            v.push((format!("block{i}.fc1.b"), &b.fc1_b));
            v.push((format!("block{i}.fc2.w"), &b.fc2_w));
            v.push((format!("block{i}.fc2.b"), &b.fc2_b));
        }
        v.push(("ln_f.gain".into(), &self.ln_f.gain));
        v.push(("ln_f.bias".into(), &self.ln_f.bias));
        v.push(("out.w".into(), &self.out_w));
        v.push(("out.b".into(), &self.out_b));
        v
    }

    pub fn tensor_views_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("role_emb".into(), &mut self.role_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.push((format!("block{i}.ln1.gain"), &mut b.ln1.gain));
            v.push((format!("block{i}.ln1.bias"), &mut b.ln1.bias));
            v.push((format!("block{i}.wq"), &mut b.wq));
            v.push((format!("block{i}.bq"), &mut b.bq));
            v.push((format!("block{i}.wk"), &mut b.wk));
            v.push((format!("block{i}.bk"), &mut b.bk));
            v.push((format!("block{i}.wv"), &mut b.wv));
            v.push((format!("block{i}.bv"), &mut b.bv));
            v.push((format!("block{i}.wo"), &mut b.wo));
            v.push((format!("block{i}.bo"), &mut b.bo));
            v.push((format!("block{i}.ln2.gain"), &mut b.ln2.gain));
            v.push((format!("block{i}.ln2.bias"), &mut b.ln2.bias));
            v.push((format!("block{i}.fc1.w"), &mut b.fc1_w));
            v.push((format!("block{i}.fc1.b"), &mut b.fc1_b));
            v.push((format!("block{i}.fc2.w"), &mut b.fc2_w));
            v.push((format!("block{i}.fc2.b"), &mut b.fc2_b));
        }
        v.push(("ln_f.gain".into(), &mut self.ln_f.gain));
        v.push(("ln_f.bias".into(), &mut self.ln_f.bias));
        v.push(("out.w".into(), &mut self.out_w));
        v.push(("out.b".into(), &mut self.out_b));
        v
    }
}

// ---------------------------------------------------------------------------
// dense helpers (row-major t x n matrices as flat slices)

/// y(t x out) = x(t x in) . w(in x out) + b
fn mm_bias(x: &[f64], t: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = w.shape();
    let mut y = Vec::with_capacity(t * n_out);
    for r in 0..t {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let mut row = b.data.clone();
        for (i, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                let wr = w.row(i);
                for (yv, &wv) in row.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
        y.extend_from_slice(&row);
    }
    y
}

/// Backward of `mm_bias`: accumulates dw, db and returns dx.
fn mm_bias_backward(
    dy: &[f64],
    x: &[f64],
    t: usize,
    w: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (n_in, n_out) = w.shape();
    let mut dx = vec![0.0; t * n_in];
    for r in 0..t {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (dbv, &dyv) in db.data.iter_mut().zip(dyr) {
            *dbv += dyv;
        }
        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
        for i in 0..n_in {
            let wr = w.row(i);
            let gwr = dw.row_mut(i);
            let xv = xr[i];
            let mut acc = 0.0;
            for j in 0..n_out {
                gwr[j] += xv * dyr[j];
                acc += dyr[j] * wr[j];
            }
            dxr[i] = acc;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Vec<f64>,    // t x d
    inv_std: Vec<f64>, // t
}

fn layer_norm(x: &[f64], t: usize, d: usize, p: &LayerNormParams) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    for r in 0..t {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for i in 0..d {
            let xh = (xr[i] - mean) * istd;
            xhat[r * d + i] = xh;
            y[r * d + i] = p.gain.data[i] * xh + p.bias.data[i];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    t: usize,
    d: usize,
    p: &LayerNormParams,
    grads: &mut LayerNormParams,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    for r in 0..t {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhr = &cache.xhat[r * d..(r + 1) * d];
        let istd = cache.inv_std[r];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            grads.gain.data[i] += dyr[i] * xhr[i];
            grads.bias.data[i] += dyr[i];
            let dxh = dyr[i] * p.gain.data[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhr[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for i in 0..d {
            let dxh = dyr[i] * p.gain.data[i];
            dx[r * d + i] = istd * (dxh - mean_dxhat - xhr[i] * mean_dxhat_xhat);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// forward / backward

#[derive(Debug, Clone)]
enum BaseRef {
    TokenRow(usize),
    ImageFeature(usize),
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>, // heads x t x t
    ctx: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    act: Vec<f64>, // tanh output, t x d_ff
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    t_len: usize,
    base: Vec<BaseRef>,
    pos_ids: Vec<usize>,
    role_ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    y: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs_row(&self, pos: usize, width: usize) -> &[f64] {
        &self.probs[pos * width..(pos + 1) * width]
    }
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Image => 0,
        Role::Prompt => 1,
        Role::Response => 2,
    }
}

/// Full forward pass. `image_embeds` holds the projector outputs for image
/// features in reading order; masked and token positions use embedding rows.
pub fn forward(
    params: &TransformerParams,
    input: &PredictorInput,
    image_embeds: &[Vec<f64>],
) -> Result<(PredictionGrid, ForwardCache)> {
    input.validate()?;
    let t = input.len();
    let d = params.d_model();
    let n_heads = params.n_heads;
    let dh = d / n_heads;
    let out_width = params.out_width();
    if t == 0 {
        return Err(Error::Validation("empty input".into()));
    }
    if t > params.max_len() {
        return Err(Error::Validation(format!(
            "sequence length {t} exceeds max_len {}",
            params.max_len()
        )));
    }

    // Embedding sum: base + position + role.
    let mut x = vec![0.0; t * d];
    let mut base = Vec::with_capacity(t);
    let mut role_ids = Vec::with_capacity(t);
    let mut image_seen = 0usize;
    for i in 0..t {
        let pid = input.position_ids[i];
        if pid >= params.max_len() {
            return Err(Error::Validation(format!(
                "position id {pid} exceeds max_len {}",
                params.max_len()
            )));
        }
        let role = input.roles[i];
        let base_ref = match role {
            Role::Image => {
                let f = image_seen;
                image_seen += 1;
                if f >= image_embeds.len() {
                    return Err(Error::Validation(
                        "more image positions than projected features".into(),
                    ));
                }
                if image_embeds[f].len() != d {
                    return Err(Error::Validation(format!(
                        "image embedding dim {} != d_model {d}",
                        image_embeds[f].len()
                    )));
                }
                BaseRef::ImageFeature(f)
            }
            _ => {
                let row = match input.tokens[i] {
                    Some(tok) => {
                        if tok as usize >= params.tok_emb.rows {
                            return Err(Error::Validation(format!(
                                "token {tok} outside embedding table"
                            )));
                        }
                        tok as usize
                    }
                    None => params.mask_row,
                };
                BaseRef::TokenRow(row)
            }
        };
        let xr = &mut x[i * d..(i + 1) * d];
        match &base_ref {
            BaseRef::TokenRow(row) => xr.copy_from_slice(params.tok_emb.row(*row)),
            BaseRef::ImageFeature(f) => xr.copy_from_slice(&image_embeds[*f]),
        }
        let pe = params.pos_emb.row(pid);
        let re = params.role_emb.row(role_index(role));
        for j in 0..d {
            xr[j] += pe[j] + re[j];
        }
        base.push(base_ref);
        role_ids.push(role_index(role));
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let (h, ln1) = layer_norm(&x, t, d, &bp.ln1);
        let q = mm_bias(&h, t, &bp.wq, &bp.bq);
        let k = mm_bias(&h, t, &bp.wk, &bp.bk);
        let v = mm_bias(&h, t, &bp.wv, &bp.bv);

        let mut attn = vec![0.0; n_heads * t * t];
        let mut ctx = vec![0.0; t * d];
        for head in 0..n_heads {
            let off = head * dh;
            for qi in 0..t {
                // Max over allowed keys, then exp/normalize over the same set;
                // blocked pairs keep exactly zero weight.
                let qrow = &q[qi * d + off..qi * d + off + dh];
                let mut max_score = f64::NEG_INFINITY;
                let mut scores = vec![f64::NEG_INFINITY; t];
                for ki in 0..t {
                    if !input.attn.allowed(qi, ki) {
                        continue;
                    }
                    let krow = &k[ki * d + off..ki * d + off + dh];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[ki] = s;
                    if s > max_score {
                        max_score = s;
                    }
                }
                let mut denom = 0.0;
                for ki in 0..t {
                    if scores[ki] > f64::NEG_INFINITY {
                        let e = (scores[ki] - max_score).exp();
                        attn[(head * t + qi) * t + ki] = e;
                        denom += e;
                    }
                }
                let ctx_row = &mut ctx[qi * d + off..qi * d + off + dh];
                for ki in 0..t {
                    let a = attn[(head * t + qi) * t + ki] / denom;
                    attn[(head * t + qi) * t + ki] = a;
                    if a != 0.0 {
                        let vrow = &v[ki * d + off..ki * d + off + dh];
                        for j in 0..dh {
                            ctx_row[j] += a * vrow[j];
                        }
                    }
                }
            }
        }
        let attn_out = mm_bias(&ctx, t, &bp.wo, &bp.bo);
        let mut x1 = x.clone();
        for (xv, ao) in x1.iter_mut().zip(&attn_out) {
            *xv += ao;
        }

        let (h2, ln2) = layer_norm(&x1, t, d, &bp.ln2);
        let u = mm_bias(&h2, t, &bp.fc1_w, &bp.fc1_b);
        let act: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
        let f = mm_bias(&act, t, &bp.fc2_w, &bp.fc2_b);
        let mut x2 = x1.clone();
        for (xv, fv) in x2.iter_mut().zip(&f) {
            *xv += fv;
        }

        blocks.push(BlockCache {
            ln1,
            h,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            h2,
            act,
        });
        x = x2;
    }

    let (y, ln_f) = layer_norm(&x, t, d, &params.ln_f);
    let logits = mm_bias(&y, t, &params.out_w, &params.out_b);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in forward pass".into()));
    }
    let mut probs = vec![0.0; t * out_width];
    for r in 0..t {
        let lr = &logits[r * out_width..(r + 1) * out_width];
        let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..out_width {
            let e = (lr[j] - max).exp();
            probs[r * out_width + j] = e;
            denom += e;
        }
        for j in 0..out_width {
            probs[r * out_width + j] /= denom;
        }
    }

    let rows = (0..t)
        .map(|r| probs[r * out_width..(r + 1) * out_width].to_vec())
        .collect();
    let grid = PredictionGrid::new(out_width, rows)?;
    Ok((
        grid,
        ForwardCache {
            t_len: t,
            base,
            pos_ids: input.position_ids.clone(),
            role_ids,
            blocks,
            ln_f,
            y,
            logits,
            probs,
        },
    ))
}

/// Weighted cross-entropy over target positions:
/// `sum_p w_p * (-log probs[p][target_p])`.
pub fn loss_from_cache(cache: &ForwardCache, width: usize, targets: &[(usize, usize, f64)]) -> f64 {
    let mut loss = 0.0;
    for &(pos, target, w) in targets {
        let lr = &cache.logits[pos * width..(pos + 1) * width];
        let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += w * (lse - lr[target]);
    }
    loss
}

/// Backward pass for the weighted cross-entropy at `targets`; accumulates
/// into `grads` and returns the gradient w.r.t. each image embedding.
pub fn backward(
    params: &TransformerParams,
    input: &PredictorInput,
    cache: &ForwardCache,
    targets: &[(usize, usize, f64)],
    grads: &mut TransformerParams,
) -> Vec<Vec<f64>> {
    let t = cache.t_len;
    let d = params.d_model();
    let n_heads = params.n_heads;
    let dh = d / n_heads;
    let out_width = params.out_width();
    let scale = 1.0 / (dh as f64).sqrt();

    // d loss / d logits = w * (softmax - onehot) at target positions.
    let mut dlogits = vec![0.0; t * out_width];
    for &(pos, target, w) in targets {
        for j in 0..out_width {
            dlogits[pos * out_width + j] += w * cache.probs[pos * out_width + j];
        }
        dlogits[pos * out_width + target] -= w;
    }

    let dy = mm_bias_backward(
        &dlogits,
        &cache.y,
        t,
        &params.out_w,
        &mut grads.out_w,
        &mut grads.out_b,
    );
    let mut dx = layer_norm_backward(&dy, &cache.ln_f, t, d, &params.ln_f, &mut grads.ln_f);

    for (bi, bp) in params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // x2 = x1 + f(ln2(x1))
        let d_act = mm_bias_backward(&dx, &bc.act, t, &bp.fc2_w, &mut gb.fc2_w, &mut gb.fc2_b);
        let d_u: Vec<f64> = d_act
            .iter()
            .zip(&bc.act)
            .map(|(&da, &a)| da * (1.0 - a * a))
            .collect();
        let d_h2 = mm_bias_backward(&d_u, &bc.h2, t, &bp.fc1_w, &mut gb.fc1_w, &mut gb.fc1_b);
        let d_from_ln2 = layer_norm_backward(&d_h2, &bc.ln2, t, d, &bp.ln2, &mut gb.ln2);
        let mut d_x1: Vec<f64> = dx.iter().zip(&d_from_ln2).map(|(a, b)| a + b).collect();

        // x1 = x + attn_out(ln1(x))
        let d_ctx = mm_bias_backward(&d_x1, &bc.ctx, t, &bp.wo, &mut gb.wo, &mut gb.bo);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for head in 0..n_heads {
            let off = head * dh;
            for qi in 0..t {
                let dctx_row = &d_ctx[qi * d + off..qi * d + off + dh];
                // dA and dv
                let mut d_attn_row = vec![0.0; t];
                let mut weighted = 0.0;
                for ki in 0..t {
                    let a = bc.attn[(head * t + qi) * t + ki];
                    if a == 0.0 {
                        continue;
                    }
                    let vrow = &bc.v[ki * d + off..ki * d + off + dh];
                    let da: f64 = dctx_row.iter().zip(vrow).map(|(x, y)| x * y).sum();
                    d_attn_row[ki] = da;
                    weighted += a * da;
                    let dvrow = &mut dv[ki * d + off..ki * d + off + dh];
                    for j in 0..dh {
                        dvrow[j] += a * dctx_row[j];
                    }
                }
                // softmax backward, then scores -> q, k
                let qrow = &bc.q[qi * d + off..qi * d + off + dh];
                for ki in 0..t {
                    let a = bc.attn[(head * t + qi) * t + ki];
                    if a == 0.0 {
                        continue;
                    }
                    let ds = a * (d_attn_row[ki] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &bc.k[ki * d + off..ki * d + off + dh];
                    let dqrow = &mut dq[qi * d + off..qi * d + off + dh];
                    for j in 0..dh {
                        dqrow[j] += ds * krow[j];
                    }
                    let dkrow = &mut dk[ki * d + off..ki * d + off + dh];
                    for j in 0..dh {
                        dkrow[j] += ds * qrow[j];
                    }
                }
            }
        }
        let dh_q = mm_bias_backward(&dq, &bc.h, t, &bp.wq, &mut gb.wq, &mut gb.bq);
        let dh_k = mm_bias_backward(&dk, &bc.h, t, &bp.wk, &mut gb.wk, &mut gb.bk);
        let dh_v = mm_bias_backward(&dv, &bc.h, t, &bp.wv, &mut gb.wv, &mut gb.bv);
        let d_h: Vec<f64> = dh_q
            .iter()
            .zip(&dh_k)
            .zip(&dh_v)
            .map(|((a, b), c)| a + b + c)
            .collect();
        let d_from_ln1 = layer_norm_backward(&d_h, &bc.ln1, t, d, &bp.ln1, &mut gb.ln1);
        for (a, b) in d_x1.iter_mut().zip(&d_from_ln1) {
            *a += b;
        }
        dx = d_x1;
    }

    // Scatter embedding gradients.
    let n_features = input.image.as_ref().map_or(0, |img| img.feature_count());
    let mut d_image = vec![vec![0.0; d]; n_features];
    for i in 0..t {
        let dxr = &dx[i * d..(i + 1) * d];
        match &cache.base[i] {
            BaseRef::TokenRow(row) => {
                let g = grads.tok_emb.row_mut(*row);
                for j in 0..d {
                    g[j] += dxr[j];
                }
            }
            BaseRef::ImageFeature(f) => {
                for j in 0..d {
                    d_image[*f][j] += dxr[j];
                }
            }
        }
        let gp = grads.pos_emb.row_mut(cache.pos_ids[i]);
        for j in 0..d {
            gp[j] += dxr[j];
        }
        let gr = grads.role_emb.row_mut(cache.role_ids[i]);
        for j in 0..d {
            gr[j] += dxr[j];
        }
    }
    d_image
}
