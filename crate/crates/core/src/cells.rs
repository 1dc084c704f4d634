//! Recurrent cells: peephole ConvLSTM and its temporal / self attention
//! augmented forms, plus the causal LSTM and gradient highway unit used by
//! the PredRNN++ baseline.

use std::collections::VecDeque;

use gridcast_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_split, multi_head_attention, multi_head_temporal_attention, AttentionDims, AttentionParams, HeadMask,
    TemporalAttentionParams,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ConvParams, Init, ParamId, ParamStore};

/// Gate order used for fused weights and parameter names.
pub const GATES: [&str; 4] = ["i", "f", "c", "o"];
const PEEPHOLE_GATES: [usize; 3] = [0, 1, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[serde(rename = "convlstm")]
    ConvLstm,
    #[serde(rename = "taaconvlstm")]
    TaaConvLstm,
    #[serde(rename = "saaconvlstm")]
    SaaConvLstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::ConvLstm => "convlstm",
            CellKind::TaaConvLstm => "taaconvlstm",
            CellKind::SaaConvLstm => "saaconvlstm",
        }
    }
}

/// Shape of the peephole weights and gate biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateParamShape {
    /// One value per channel, broadcast over the grid.
    #[default]
    PerChannel,
    /// One value per channel and grid cell.
    PerCell,
}

/// Which past hidden states temporal attention looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HistoryMode {
    /// The `horizon` most recent states.
    #[default]
    Recent,
    /// `horizon` states spread evenly over the last `span` states.
    Uniform { span: usize },
}

/// Indices into a most-recent-first buffer of `available` states.
pub fn select_history(available: usize, horizon: usize, mode: HistoryMode) -> Vec<usize> {
    match mode {
        HistoryMode::Recent => (0..available.min(horizon)).collect(),
        HistoryMode::Uniform { span } => {
            let m = available.min(span.max(horizon));
            if m <= horizon {
                return (0..m).collect();
            }
            if horizon == 1 {
                return vec![0];
            }
            (0..horizon)
                .map(|i| ((i * (m - 1)) as f64 / (horizon - 1) as f64).round() as usize)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    /// Share of each gate's channels produced by attention.
    pub fraction: f64,
    /// Temporal attention horizon `H_a`.
    pub horizon: usize,
    /// Learned relative position logits.
    pub relative: bool,
    pub history: HistoryMode,
    /// Cut gradient flow into stored history states.
    pub detach_history: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            n_heads: 4,
            fraction: 0.25,
            horizon: 4,
            relative: true,
            history: HistoryMode::Recent,
            detach_history: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    pub c_in: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub grid: (usize, usize),
    pub gate_shape: GateParamShape,
    pub peephole: bool,
    pub attention: AttentionConfig,
}

impl CellConfig {
    pub fn new(kind: CellKind, c_in: usize, hidden: usize, kernel: usize, grid: (usize, usize)) -> Self {
        CellConfig {
            kind,
            c_in,
            hidden,
            kernel,
            grid,
            gate_shape: GateParamShape::PerChannel,
            peephole: true,
            attention: AttentionConfig::default(),
        }
    }
}

/// Recurrent state of one cell on one graph.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
    /// Past hidden states, most recent first, excluding `h` itself.
    past: VecDeque<Var>,
    /// Whether `h` is the zero initial state.
    fresh: bool,
    fused: FusedWeights,
}

#[derive(Debug, Clone, Copy)]
struct FusedWeights {
    wx: Var,
    wh: Var,
}

impl CellState {
    /// Number of stored past hidden states.
    pub fn stored(&self) -> usize {
        self.past.len()
    }

    pub fn past(&self) -> impl Iterator<Item = Var> + '_ {
        self.past.iter().copied()
    }

    /// Same values with gradient flow into earlier steps cut.
    pub fn detach<T: Scalar>(&self, g: &Graph<T>) -> CellState {
        CellState {
            h: g.detach(self.h),
            c: g.detach(self.c),
            past: self.past.iter().map(|&v| g.detach(v)).collect(),
            fresh: self.fresh,
            fused: self.fused,
        }
    }
}

/// Peephole ConvLSTM, optionally attention augmented.
///
/// Parameter names: `{prefix}.{gate}.{x|h}.w` for the per-gate input and
/// state convolutions, `{prefix}.{gate}.b`, `{prefix}.{gate}.peep` for
/// gates `i`, `f`, `o`, and `{prefix}.att.*` for attention.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub cfg: CellConfig,
    x_convs: Vec<ParamId>,
    h_convs: Vec<ParamId>,
    biases: Vec<ParamId>,
    peepholes: Option<Vec<ParamId>>,
    /// Per-gate convolution widths of the input and state branches.
    x_width: usize,
    h_width: usize,
    pub spatial: Option<AttentionParams>,
    pub temporal: Option<TemporalAttentionParams>,
}

impl ConvLstmCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        cfg: CellConfig,
    ) -> Result<Self> {
        if cfg.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", cfg.kernel)));
        }
        if cfg.hidden == 0 || cfg.c_in == 0 {
            return Err(Error::config("cell channels must be positive"));
        }
        let d = cfg.hidden;
        let att = &cfg.attention;
        let (x_width, h_width, att_f_in, per_head) = match cfg.kind {
            CellKind::ConvLstm => (d, d, 0, 0),
            CellKind::TaaConvLstm => {
                let (conv, per_head) = attention_split(d, att.fraction, att.n_heads)?;
                (d, conv, d, per_head)
            }
            CellKind::SaaConvLstm => {
                let (conv, per_head) = attention_split(d, att.fraction, att.n_heads)?;
                (conv, d, cfg.c_in, per_head)
            }
        };
        let k = cfg.kernel;
        let mut x_convs = Vec::with_capacity(4);
        let mut h_convs = Vec::with_capacity(4);
        for gate in GATES {
            // Fan-in of the full gate pre-activation.
            let fan_in = ((cfg.c_in + d) * k * k) as f64;
            let bound = 1.0 / fan_in.sqrt();
            x_convs.push(store.insert(
                format!("{prefix}.{gate}.x.w"),
                init.uniform(&[x_width, cfg.c_in, k, k], bound),
            ));
            h_convs.push(store.insert(format!("{prefix}.{gate}.h.w"), init.uniform(&[h_width, d, k, k], bound)));
        }
        let gate_shape: Vec<usize> = match cfg.gate_shape {
            GateParamShape::PerChannel => vec![d],
            GateParamShape::PerCell => vec![d, cfg.grid.0, cfg.grid.1],
        };
        let biases = GATES
            .iter()
            .map(|g| store.insert(format!("{prefix}.{g}.b"), Tensor::zeros(&gate_shape)))
            .collect();
        let peepholes = cfg.peephole.then(|| {
            PEEPHOLE_GATES
                .iter()
                .map(|&g| store.insert(format!("{prefix}.{}.peep", GATES[g]), Tensor::zeros(&gate_shape)))
                .collect()
        });
        let dims = AttentionDims {
            f_in: att_f_in,
            n_heads: att.n_heads,
            dk_head: per_head,
            dv_head: per_head,
            relative: att.relative.then_some(cfg.grid),
        };
        let att_prefix = format!("{prefix}.att");
        let (spatial, temporal) = match cfg.kind {
            CellKind::ConvLstm => (None, None),
            CellKind::SaaConvLstm => (Some(AttentionParams::new(store, init, &att_prefix, dims)), None),
            CellKind::TaaConvLstm => (
                None,
                Some(TemporalAttentionParams::new(store, init, &att_prefix, dims, att.horizon)?),
            ),
        };
        Ok(ConvLstmCell {
            cfg,
            x_convs,
            h_convs,
            biases,
            peepholes,
            x_width,
            h_width,
            spatial,
            temporal,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cfg.hidden
    }

    pub fn n_heads(&self) -> Option<usize> {
        match self.cfg.kind {
            CellKind::ConvLstm => None,
            _ => Some(self.cfg.attention.n_heads),
        }
    }

    /// Zero state on `b`'s graph, with the per-gate convolutions fused for
    /// the rollout.
    pub fn init_state<T: Scalar>(&self, b: &Bound<'_, T>) -> Result<CellState> {
        let g = b.graph();
        let (h, w) = self.cfg.grid;
        let d = self.cfg.hidden;
        let wx = g.concat(&self.x_convs.iter().map(|&p| b.var(p)).collect::<Vec<_>>(), 0)?;
        let wh = g.concat(&self.h_convs.iter().map(|&p| b.var(p)).collect::<Vec<_>>(), 0)?;
        Ok(CellState {
            h: g.zeros(&[d, h, w]),
            c: g.zeros(&[d, h, w]),
            past: VecDeque::new(),
            fresh: true,
            fused: FusedWeights { wx, wh },
        })
    }

    /// Past hidden states the next step attends to, most recent first.
    pub fn attended(&self, state: &CellState) -> Vec<Var> {
        let att = &self.cfg.attention;
        select_history(state.past.len(), att.horizon, att.history)
            .into_iter()
            .map(|i| state.past[i])
            .collect()
    }

    fn buffer_len(&self) -> usize {
        let att = &self.cfg.attention;
        match att.history {
            HistoryMode::Recent => att.horizon,
            HistoryMode::Uniform { span } => span.max(att.horizon),
        }
    }

    fn gate_param<T: Scalar>(&self, g: &Graph<T>, x: Var, p: Var) -> Result<Var> {
        Ok(match self.cfg.gate_shape {
            GateParamShape::PerChannel => g.channel_add(x, p)?,
            GateParamShape::PerCell => g.add(x, p)?,
        })
    }

    fn peephole<T: Scalar>(&self, g: &Graph<T>, c: Var, p: Var) -> Result<Var> {
        Ok(match self.cfg.gate_shape {
            GateParamShape::PerChannel => g.channel_mul(c, p)?,
            GateParamShape::PerCell => g.mul(c, p)?,
        })
    }

    /// One step. `mask` selects attention heads (all heads when `None`).
    pub fn step<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        x: Var,
        state: &CellState,
        mask: Option<&HeadMask>,
    ) -> Result<CellState> {
        let g = b.graph();
        let xs = g.shape(x);
        let (gh, gw) = self.cfg.grid;
        if xs != [self.cfg.c_in, gh, gw] {
            return Err(Error::shape(format!(
                "cell input {xs:?}, expected [{}, {gh}, {gw}]",
                self.cfg.c_in
            )));
        }
        let d = self.cfg.hidden;
        let all_heads;
        let mask = match mask {
            Some(m) => m,
            None => {
                all_heads = HeadMask::keep_all(self.cfg.attention.n_heads);
                &all_heads
            }
        };

        let conv_x = g.conv2d(x, state.fused.wx, None)?;
        let conv_h = g.conv2d(state.h, state.fused.wh, None)?;
        let attention = match self.cfg.kind {
            CellKind::ConvLstm => None,
            CellKind::SaaConvLstm => {
                let params = self.spatial.as_ref().expect("saa cell has attention");
                Some(multi_head_attention(b, params, x, x, mask)?)
            }
            CellKind::TaaConvLstm => {
                let params = self.temporal.as_ref().expect("taa cell has attention");
                let history = self.attended(state);
                if history.is_empty() {
                    Some(g.zeros(&[params.base.dims.dv_total(), gh, gw]))
                } else {
                    Some(multi_head_temporal_attention(b, params, state.h, &history, mask)?)
                }
            }
        };

        let branch = |conv: Var, gate: usize, width: usize, augmented: bool| -> Result<Var> {
            let part = g.narrow(conv, 0, gate * width, width)?;
            match (augmented, attention) {
                (true, Some(a)) => Ok(g.concat(&[part, a], 0)?),
                _ => Ok(part),
            }
        };
        let saa = self.cfg.kind == CellKind::SaaConvLstm;
        let taa = self.cfg.kind == CellKind::TaaConvLstm;
        let mut pre = Vec::with_capacity(4);
        for gate in 0..4 {
            let xp = branch(conv_x, gate, self.x_width, saa)?;
            let hp = branch(conv_h, gate, self.h_width, taa)?;
            let sum = g.add(xp, hp)?;
            pre.push(self.gate_param(g, sum, b.var(self.biases[gate]))?);
        }
        let peep = |slot: usize, c: Var, z: Var| -> Result<Var> {
            match &self.peepholes {
                Some(p) => Ok(g.add(z, self.peephole(g, c, b.var(p[slot]))?)?),
                None => Ok(z),
            }
        };
        let i = g.sigmoid(peep(0, state.c, pre[0])?)?;
        let f = g.sigmoid(peep(1, state.c, pre[1])?)?;
        let cand = g.tanh(pre[2])?;
        let c = g.add(g.mul(f, state.c)?, g.mul(i, cand)?)?;
        let o = g.sigmoid(peep(2, c, pre[3])?)?;
        let h = g.mul(o, g.tanh(c)?)?;
        debug_assert!(g.value(h).data().iter().all(|v| !(v.abs() > T::one())));
        debug_assert_eq!(g.shape(h), [d, gh, gw]);

        let mut past = state.past.clone();
        if taa && !state.fresh {
            let prev = if self.cfg.attention.detach_history {
                g.detach(state.h)
            } else {
                state.h
            };
            past.push_front(prev);
            past.truncate(self.buffer_len());
        }
        Ok(CellState {
            h,
            c,
            past,
            fresh: false,
            fused: state.fused,
        })
    }
}

/// Causal LSTM with temporal memory `C` and spatial memory `M`.
///
/// `(g, i, f) = (tanh, σ, σ)(W1 ∗ [X, H, C])`, `C' = f∘C + i∘g`,
/// `(g', i', f') = (tanh, σ, σ)(W2 ∗ [X, C', M])`,
/// `M' = f'∘tanh(W3 ∗ M) + i'∘g'`, `o = tanh(W4 ∗ [X, C', M'])`,
/// `H' = o∘tanh(W5 ∗ [C', M'])`. All convolutions carry biases.
#[derive(Debug, Clone)]
pub struct CausalLstmCell {
    pub c_in: usize,
    pub hidden: usize,
    pub w1: ConvParams,
    pub w2: ConvParams,
    pub w3: ConvParams,
    pub w4: ConvParams,
    pub w5: ConvParams,
}

/// Output of a causal LSTM step.
#[derive(Debug, Clone, Copy)]
pub struct CausalOut {
    pub h: Var,
    pub c: Var,
    pub m: Var,
}

impl CausalLstmCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        c_in: usize,
        hidden: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {kernel} must be odd")));
        }
        let d = hidden;
        let mut conv = |name: &str, ci: usize, co: usize| ConvParams::new(store, init, &format!("{prefix}.{name}"), ci, co, kernel, true);
        Ok(CausalLstmCell {
            c_in,
            hidden,
            w1: conv("w1", c_in + 2 * d, 3 * d),
            w2: conv("w2", c_in + 2 * d, 3 * d),
            w3: conv("w3", d, d),
            w4: conv("w4", c_in + 2 * d, d),
            w5: conv("w5", 2 * d, d),
        })
    }

    pub fn step<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, h: Var, c: Var, m: Var) -> Result<CausalOut> {
        let g = b.graph();
        let d = self.hidden;
        let xs = g.shape(x);
        if xs.len() != 3 || xs[0] != self.c_in {
            return Err(Error::shape(format!("causal LSTM input {xs:?} lacks {} channels", self.c_in)));
        }
        for (name, v) in [("H", h), ("C", c), ("M", m)] {
            if g.shape(v) != [d, xs[1], xs[2]] {
                return Err(Error::shape(format!("causal LSTM {name} has shape {:?}", g.shape(v))));
            }
        }
        let z1 = self.w1.apply(b, g.concat(&[x, h, c], 0)?)?;
        let gt = g.tanh(g.narrow(z1, 0, 0, d)?)?;
        let it = g.sigmoid(g.narrow(z1, 0, d, d)?)?;
        let ft = g.sigmoid(g.narrow(z1, 0, 2 * d, d)?)?;
        let c_new = g.add(g.mul(ft, c)?, g.mul(it, gt)?)?;

        let z2 = self.w2.apply(b, g.concat(&[x, c_new, m], 0)?)?;
        let gt2 = g.tanh(g.narrow(z2, 0, 0, d)?)?;
        let it2 = g.sigmoid(g.narrow(z2, 0, d, d)?)?;
        let ft2 = g.sigmoid(g.narrow(z2, 0, 2 * d, d)?)?;
        let m_mix = g.tanh(self.w3.apply(b, m)?)?;
        let m_new = g.add(g.mul(ft2, m_mix)?, g.mul(it2, gt2)?)?;

        let o = g.tanh(self.w4.apply(b, g.concat(&[x, c_new, m_new], 0)?)?)?;
        let cm = g.tanh(self.w5.apply(b, g.concat(&[c_new, m_new], 0)?)?)?;
        let h_new = g.mul(o, cm)?;
        Ok(CausalOut {
            h: h_new,
            c: c_new,
            m: m_new,
        })
    }
}

/// Gradient highway unit: `P = tanh(W_px ∗ X + W_pz ∗ Z)`,
/// `S = σ(W_sx ∗ X + W_sz ∗ Z)`, `Z' = S∘P + (1 − S)∘Z`.
#[derive(Debug, Clone)]
pub struct GhuCell {
    pub channels: usize,
    pub wpx: ConvParams,
    pub wpz: ConvParams,
    pub wsx: ConvParams,
    pub wsz: ConvParams,
}

impl GhuCell {
    /// Input-side convolutions carry the biases.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {kernel} must be odd")));
        }
        let c = channels;
        let mut conv =
            |name: &str, bias: bool| ConvParams::new(store, init, &format!("{prefix}.{name}"), c, c, kernel, bias);
        Ok(GhuCell {
            channels,
            wpx: conv("wpx", true),
            wpz: conv("wpz", false),
            wsx: conv("wsx", true),
            wsz: conv("wsz", false),
        })
    }

    pub fn step<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, z: Var) -> Result<Var> {
        let g = b.graph();
        if g.shape(x) != g.shape(z) || g.shape(x).first() != Some(&self.channels) {
            return Err(Error::shape(format!(
                "GHU input {:?} and state {:?} must both have {} channels",
                g.shape(x),
                g.shape(z),
                self.channels
            )));
        }
        let p = g.tanh(g.add(self.wpx.apply(b, x)?, self.wpz.apply(b, z)?)?)?;
        let s = g.sigmoid(g.add(self.wsx.apply(b, x)?, self.wsz.apply(b, z)?)?)?;
        // S∘P + Z − S∘Z
        let sp = g.mul(s, p)?;
        let sz = g.mul(s, z)?;
        Ok(g.sub(g.add(sp, z)?, sz)?)
    }
}
