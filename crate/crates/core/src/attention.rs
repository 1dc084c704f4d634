//! Visual multi-head attention with relative position logits, its temporal
//! extension over a window of past frames, and the attention-augmented
//! convolutions built from them.
//!
//! Feature maps are `[F, H, W]`. Attention flattens them to `[HW, F]` rows,
//! projects each head to queries/keys of width `dk_head` and values of width
//! `dv_head`, and fuses the concatenated head outputs with a learned
//! `dv_total × dv_total` matrix.

use gridcast_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ConvParams, Init, ParamId, ParamStore};

/// Sizes of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub f_in: usize,
    pub n_heads: usize,
    pub dk_head: usize,
    pub dv_head: usize,
    /// Grid extent `(h, w)` when relative position logits are enabled.
    pub relative: Option<(usize, usize)>,
}

impl AttentionDims {
    pub fn dk_total(&self) -> usize {
        self.n_heads * self.dk_head
    }

    pub fn dv_total(&self) -> usize {
        self.n_heads * self.dv_head
    }
}

/// Splits `channels` output channels between a convolution and attention.
///
/// Attention receives `n_heads · round(fraction · channels / n_heads)`
/// channels (at least one per head); the convolution keeps the rest.
/// Returns `(conv_channels, per_head)`.
pub fn attention_split(channels: usize, fraction: f64, n_heads: usize) -> Result<(usize, usize)> {
    if n_heads == 0 {
        return Err(Error::config("attention needs at least one head"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "attention fraction {fraction} must lie in (0, 1)"
        )));
    }
    let per_head = ((fraction * channels as f64 / n_heads as f64).round() as usize).max(1);
    let att = per_head * n_heads;
    if att >= channels {
        return Err(Error::config(format!(
            "{n_heads} heads × {per_head} channels leave no convolution channels out of {channels}"
        )));
    }
    Ok((channels - att, per_head))
}

#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct RelativeEmbedding {
    /// `[2h − 1, dk_head]`, shared by all heads.
    pub rows: ParamId,
    /// `[2w − 1, dk_head]`, shared by all heads.
    pub cols: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub dims: AttentionDims,
    pub heads: Vec<HeadProjection>,
    /// `[dv_total, dv_total]` head fusion.
    pub wo: ParamId,
    pub relative: Option<RelativeEmbedding>,
}

impl AttentionParams {
    /// Registers parameters under `{prefix}.{head}.{wq|wk|wv}`, `{prefix}.wo`
    /// and `{prefix}.rel_{h|w}`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        dims: AttentionDims,
    ) -> Self {
        let proj_std = (dims.f_in.max(1) as f64).powf(-0.5);
        let heads = (0..dims.n_heads)
            .map(|h| HeadProjection {
                wq: store.insert(
                    format!("{prefix}.{h}.wq"),
                    init.normal(&[dims.f_in, dims.dk_head], proj_std),
                ),
                wk: store.insert(
                    format!("{prefix}.{h}.wk"),
                    init.normal(&[dims.f_in, dims.dk_head], proj_std),
                ),
                wv: store.insert(
                    format!("{prefix}.{h}.wv"),
                    init.normal(&[dims.f_in, dims.dv_head], proj_std),
                ),
            })
            .collect();
        let dv = dims.dv_total();
        let wo = store.insert(
            format!("{prefix}.wo"),
            init.normal(&[dv, dv], (dv.max(1) as f64).powf(-0.5)),
        );
        let relative = dims.relative.map(|(h, w)| {
            let std = (dims.dk_head.max(1) as f64).powf(-0.5);
            RelativeEmbedding {
                rows: store.insert(format!("{prefix}.rel_h"), init.normal(&[2 * h - 1, dims.dk_head], std)),
                cols: store.insert(format!("{prefix}.rel_w"), init.normal(&[2 * w - 1, dims.dk_head], std)),
            }
        });
        AttentionParams {
            dims,
            heads,
            wo,
            relative,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.dims.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct TemporalAttentionParams {
    pub base: AttentionParams,
    /// `[horizon]` learned frame weights, index 0 = most recent frame.
    pub w_tau: ParamId,
    pub horizon: usize,
}

impl TemporalAttentionParams {
    /// As [`AttentionParams::new`] plus `{prefix}.w_tau`, initialised to `1/horizon`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        dims: AttentionDims,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("attention horizon must be at least 1"));
        }
        let base = AttentionParams::new(store, init, prefix, dims);
        let w_tau = store.insert(
            format!("{prefix}.w_tau"),
            Tensor::full(&[horizon], T::from_f64_lossy(1.0 / horizon as f64)),
        );
        Ok(TemporalAttentionParams {
            base,
            w_tau,
            horizon,
        })
    }
}

/// Which heads contribute to a multi-head output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadMask {
    keep: Vec<bool>,
}

impl HeadMask {
    pub fn keep_all(n_heads: usize) -> Self {
        HeadMask {
            keep: vec![true; n_heads],
        }
    }

    pub fn drop_all(n_heads: usize) -> Self {
        HeadMask {
            keep: vec![false; n_heads],
        }
    }

    /// Keeps every head except `head`.
    pub fn drop_one(n_heads: usize, head: usize) -> Self {
        let mut keep = vec![true; n_heads];
        keep[head] = false;
        HeadMask { keep }
    }

    pub fn from_flags(keep: Vec<bool>) -> Self {
        HeadMask { keep }
    }

    pub fn keeps(&self, head: usize) -> bool {
        self.keep[head]
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    fn check(&self, n_heads: usize) -> Result<()> {
        if self.keep.len() != n_heads {
            return Err(Error::MaskLength {
                expected: n_heads,
                got: self.keep.len(),
            });
        }
        Ok(())
    }
}

/// Scaled logits `(QKᵀ + S_rel) / √d_k`.
pub fn attention_logits<T: Scalar>(g: &Graph<T>, q: Var, k: Var, s_rel: Option<Var>) -> Result<Var> {
    let dk = g.shape(q)[1];
    let kd = g.shape(k)[1];
    if dk != kd {
        return Err(Error::shape(format!("query width {dk} != key width {kd}")));
    }
    let mut logits = g.matmul_t(q, k, false, true)?;
    if let Some(s) = s_rel {
        logits = g.add(logits, s)?;
    }
    Ok(g.scale(logits, T::from_f64_lossy(1.0 / (dk as f64).sqrt()))?)
}

/// Row-stochastic attention weights over the key axis.
pub fn attention_weights<T: Scalar>(g: &Graph<T>, q: Var, k: Var, s_rel: Option<Var>) -> Result<Var> {
    let logits = attention_logits(g, q, k, s_rel)?;
    Ok(g.softmax(logits, 1)?)
}

/// `softmax((QKᵀ + S_rel)/√d_k) · V` for `Q, K: [HW, d_k]`, `V: [HW, d_v]`.
pub fn single_head_attention<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    s_rel: Option<Var>,
) -> Result<Var> {
    let weights = attention_weights(g, q, k, s_rel)?;
    Ok(g.matmul(weights, v)?)
}

/// Relative position logits `[HW, HW]` for queries on an `h×w` grid.
pub fn relative_logits<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    rel_rows: Var,
    rel_cols: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    Ok(g.rel_logits(q, rel_rows, rel_cols, h, w)?)
}

fn spatial(g: &Graph<impl Scalar>, x: Var, f_in: usize) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != f_in {
        return Err(Error::shape(format!(
            "attention input {s:?} does not have {f_in} channels"
        )));
    }
    Ok((s[1], s[2]))
}

/// Per-head query projections (and their relative logits) of one frame.
struct Queries {
    q: Vec<Option<(Var, Option<Var>)>>,
}

fn project_queries<T: Scalar>(
    b: &Bound<'_, T>,
    params: &AttentionParams,
    x_flat: Var,
    hw: (usize, usize),
    mask: &HeadMask,
) -> Result<Queries> {
    let g = b.graph();
    if let Some(grid) = params.dims.relative {
        if grid != hw {
            return Err(Error::shape(format!(
                "relative embeddings sized for {grid:?}, input grid is {hw:?}"
            )));
        }
    }
    let q = params
        .heads
        .iter()
        .enumerate()
        .map(|(h, proj)| {
            if !mask.keeps(h) {
                return Ok(None);
            }
            let q = g.matmul_t(x_flat, b.var(proj.wq), true, false)?;
            let s_rel = match params.relative {
                Some(rel) => Some(relative_logits(
                    g,
                    q,
                    b.var(rel.rows),
                    b.var(rel.cols),
                    hw.0,
                    hw.1,
                )?),
                None => None,
            };
            Ok(Some((q, s_rel)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Queries { q })
}

/// Concatenated (unfused) head outputs `[HW, dv_total]` of the queries
/// attending to `kv_flat`. Dropped heads contribute zeros.
fn head_outputs<T: Scalar>(
    b: &Bound<'_, T>,
    params: &AttentionParams,
    queries: &Queries,
    kv_flat: Var,
    hw: usize,
) -> Result<Var> {
    let g = b.graph();
    let outs = params
        .heads
        .iter()
        .zip(&queries.q)
        .map(|(proj, q)| match q {
            None => Ok(g.zeros(&[hw, params.dims.dv_head])),
            Some((q, s_rel)) => {
                let k = g.matmul_t(kv_flat, b.var(proj.wk), true, false)?;
                let v = g.matmul_t(kv_flat, b.var(proj.wv), true, false)?;
                single_head_attention(g, *q, k, v, *s_rel)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat(&outs, 1)?)
}

/// Applies `W_o` to `[HW, dv]` head outputs and returns `[dv, h, w]`.
fn fuse<T: Scalar>(b: &Bound<'_, T>, params: &AttentionParams, heads: Var, hw: (usize, usize)) -> Result<Var> {
    let g = b.graph();
    // (heads · W_o)ᵀ = W_oᵀ · headsᵀ
    let fused = g.matmul_t(b.var(params.wo), heads, true, true)?;
    Ok(g.reshape(fused, &[params.dims.dv_total(), hw.0, hw.1])?)
}

/// Multi-head attention with queries from `x_q` and keys/values from `x_kv`.
/// Output `[dv_total, H, W]`.
pub fn multi_head_attention<T: Scalar>(
    b: &Bound<'_, T>,
    params: &AttentionParams,
    x_q: Var,
    x_kv: Var,
    mask: &HeadMask,
) -> Result<Var> {
    mask.check(params.n_heads())?;
    let g = b.graph();
    let f = params.dims.f_in;
    let hw = spatial(g, x_q, f)?;
    if spatial(g, x_kv, f)? != hw {
        return Err(Error::shape("query and key/value frames differ in extent"));
    }
    let n = hw.0 * hw.1;
    let q_flat = g.reshape(x_q, &[f, n])?;
    let kv_flat = if x_kv == x_q { q_flat } else { g.reshape(x_kv, &[f, n])? };
    let queries = project_queries(b, params, q_flat, hw, mask)?;
    let heads = head_outputs(b, params, &queries, kv_flat, n)?;
    fuse(b, params, heads, hw)
}

/// Multi-head temporal attention: `Σ_τ w_τ · MA(x_t W_q, h_τ W_k, h_τ W_v)`.
///
/// `history[0]` is the most recent attended frame and pairs with `w_τ[0]`.
/// Shorter histories use only the available terms.
pub fn multi_head_temporal_attention<T: Scalar>(
    b: &Bound<'_, T>,
    params: &TemporalAttentionParams,
    x_t: Var,
    history: &[Var],
    mask: &HeadMask,
) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if history.len() > params.horizon {
        return Err(Error::shape(format!(
            "history of {} frames exceeds horizon {}",
            history.len(),
            params.horizon
        )));
    }
    let base = &params.base;
    mask.check(base.n_heads())?;
    let g = b.graph();
    let f = base.dims.f_in;
    let hw = spatial(g, x_t, f)?;
    let n = hw.0 * hw.1;
    let q_flat = g.reshape(x_t, &[f, n])?;
    let queries = project_queries(b, base, q_flat, hw, mask)?;
    let w = b.var(params.w_tau);
    let terms = history
        .iter()
        .enumerate()
        .map(|(tau, &frame)| {
            if spatial(g, frame, f)? != hw {
                return Err(Error::shape("history frame extent differs from query frame"));
            }
            let kv_flat = g.reshape(frame, &[f, n])?;
            let heads = head_outputs(b, base, &queries, kv_flat, n)?;
            let w_tau = g.narrow(w, 0, tau, 1)?;
            Ok(g.scale_by(heads, w_tau)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_all(&terms)?;
    fuse(b, base, total, hw)
}

/// `[Conv(x), MA(x, x)]` along the channel axis.
pub fn saaconv<T: Scalar>(
    b: &Bound<'_, T>,
    conv: &ConvParams,
    att: &AttentionParams,
    x: Var,
    mask: &HeadMask,
) -> Result<Var> {
    let g = b.graph();
    let c = conv.apply(b, x)?;
    let a = multi_head_attention(b, att, x, x, mask)?;
    Ok(g.concat(&[c, a], 0)?)
}

/// `[Conv(x_t), MTA(x_t, history)]` along the channel axis.
pub fn taaconv<T: Scalar>(
    b: &Bound<'_, T>,
    conv: &ConvParams,
    att: &TemporalAttentionParams,
    x_t: Var,
    history: &[Var],
    mask: &HeadMask,
) -> Result<Var> {
    let g = b.graph();
    let c = conv.apply(b, x_t)?;
    let a = multi_head_temporal_attention(b, att, x_t, history, mask)?;
    Ok(g.concat(&[c, a], 0)?)
}
