//! Stacked predictive-coding network with pluggable recurrent cells, the
//! PredRNN++ baseline, and sequence rollout.

use gridcast_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::HeadMask;
use crate::cells::{
    AttentionConfig, CausalLstmCell, CellConfig, CellKind, CellState, ConvLstmCell, GateParamShape, GhuCell,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ConvParams, Init, ParamStore};

/// Mass channels per frame (occupied, free).
pub const FRAME_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    /// Channels per layer; layer 0 is the frame itself.
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub cells: Vec<CellKind>,
    /// Grid extent of layer 0.
    pub grid: (usize, usize),
    pub attention: AttentionConfig,
    #[serde(default)]
    pub gate_shape: GateParamShape,
    pub peephole: bool,
}

impl StackConfig {
    /// Pure ConvLSTM stack.
    pub fn vanilla(channels: &[usize], grid: (usize, usize)) -> Self {
        StackConfig {
            channels: channels.to_vec(),
            kernels: vec![3; channels.len()],
            cells: vec![CellKind::ConvLstm; channels.len()],
            grid,
            attention: AttentionConfig::default(),
            gate_shape: GateParamShape::PerChannel,
            peephole: true,
        }
    }

    /// Temporal attention in the top layer.
    pub fn taa(channels: &[usize], grid: (usize, usize)) -> Self {
        let mut cfg = Self::vanilla(channels, grid);
        *cfg.cells.last_mut().expect("non-empty") = CellKind::TaaConvLstm;
        cfg
    }

    /// Self attention in the top two layers.
    pub fn saa(channels: &[usize], grid: (usize, usize)) -> Self {
        let mut cfg = Self::vanilla(channels, grid);
        let n = cfg.cells.len();
        for kind in cfg.cells.iter_mut().skip(n.saturating_sub(2)) {
            *kind = CellKind::SaaConvLstm;
        }
        cfg
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    /// Grid extent of layer `l`.
    pub fn layer_grid(&self, l: usize) -> (usize, usize) {
        (self.grid.0 >> l, self.grid.1 >> l)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 {
            return Err(Error::config("stack needs at least one layer"));
        }
        if self.kernels.len() != n || self.cells.len() != n {
            return Err(Error::config(format!(
                "{} layers but {} kernel sizes and {} cell kinds",
                n,
                self.kernels.len(),
                self.cells.len()
            )));
        }
        if self.channels[0] != FRAME_CHANNELS {
            return Err(Error::config(format!(
                "layer 0 must have {FRAME_CHANNELS} channels, got {}",
                self.channels[0]
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("layer channels must be positive"));
        }
        let div = 1usize << (n - 1);
        let (h, w) = self.grid;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "grid {h}×{w} is not divisible by 2^{} for {n} layers",
                n - 1
            )));
        }
        if let Some(k) = self.kernels.iter().find(|k| *k % 2 == 0) {
            return Err(Error::config(format!("kernel size {k} must be odd")));
        }
        Ok(())
    }
}

/// Per-layer tensors carried between steps.
#[derive(Debug, Clone)]
pub struct StackState {
    pub cells: Vec<CellState>,
    /// Error representations from the previous step.
    pub errors: Vec<Var>,
    steps: usize,
}

impl StackState {
    pub fn detach<T: Scalar>(&self, g: &Graph<T>) -> StackState {
        StackState {
            cells: self.cells.iter().map(|c| c.detach(g)).collect(),
            errors: self.errors.iter().map(|&e| g.detach(e)).collect(),
            steps: self.steps,
        }
    }
}

/// Everything computed in one step, for inspection.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub prediction: Var,
    pub a: Vec<Var>,
    pub a_hat: Vec<Var>,
    pub e: Vec<Var>,
    pub r: Vec<Var>,
}

/// Predictive-coding stack. Parameters: `cell.{l}.*`, `prednet.ahat.{l}.*`
/// (`R_l → Â_l`) and `prednet.a.{l}.*` (`E_{l−1} → A_l`).
#[derive(Debug, Clone)]
pub struct PredNet {
    pub cfg: StackConfig,
    pub cells: Vec<ConvLstmCell>,
    ahat: Vec<ConvParams>,
    a: Vec<ConvParams>,
}

impl PredNet {
    pub fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: StackConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_layers();
        let mut cells = Vec::with_capacity(n);
        for l in 0..n {
            let c = cfg.channels[l];
            let above = if l + 1 < n { cfg.channels[l + 1] } else { 0 };
            let cell_cfg = CellConfig {
                kind: cfg.cells[l],
                c_in: 2 * c + above,
                hidden: c,
                kernel: cfg.kernels[l],
                grid: cfg.layer_grid(l),
                gate_shape: cfg.gate_shape,
                peephole: cfg.peephole,
                attention: cfg.attention,
            };
            cells.push(ConvLstmCell::new(store, init, &format!("cell.{l}"), cell_cfg)?);
        }
        let ahat = (0..n)
            .map(|l| {
                let c = cfg.channels[l];
                ConvParams::new(store, init, &format!("prednet.ahat.{l}"), c, c, cfg.kernels[l], true)
            })
            .collect();
        let a = (1..n)
            .map(|l| {
                ConvParams::new(
                    store,
                    init,
                    &format!("prednet.a.{l}"),
                    2 * cfg.channels[l - 1],
                    cfg.channels[l],
                    cfg.kernels[l],
                    true,
                )
            })
            .collect();
        Ok(PredNet { cfg, cells, ahat, a })
    }

    pub fn init_state<T: Scalar>(&self, b: &Bound<'_, T>) -> Result<StackState> {
        let g = b.graph();
        let cells = self.cells.iter().map(|c| c.init_state(b)).collect::<Result<Vec<_>>>()?;
        let errors = (0..self.cfg.num_layers())
            .map(|l| {
                let (h, w) = self.cfg.layer_grid(l);
                g.zeros(&[2 * self.cfg.channels[l], h, w])
            })
            .collect();
        Ok(StackState {
            cells,
            errors,
            steps: 0,
        })
    }

    fn check_mask(&self, mask: Option<&HeadMask>) -> Result<()> {
        if let Some(m) = mask {
            for cell in &self.cells {
                if let Some(n) = cell.n_heads() {
                    if m.len() != n {
                        return Err(Error::MaskLength {
                            expected: n,
                            got: m.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// One step. With `input == None` the step's own prediction is used as
    /// the observed frame.
    pub fn step<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        input: Option<Var>,
        state: &StackState,
        mask: Option<&HeadMask>,
    ) -> Result<(StepTrace, StackState)> {
        self.check_mask(mask)?;
        let g = b.graph();
        let n = self.cfg.num_layers();
        if let Some(x) = input {
            let (h, w) = self.cfg.grid;
            if g.shape(x) != [FRAME_CHANNELS, h, w] {
                return Err(Error::shape(format!(
                    "frame {:?}, expected [{FRAME_CHANNELS}, {h}, {w}]",
                    g.shape(x)
                )));
            }
        }

        // Top-down representation update.
        let mut cells: Vec<Option<CellState>> = vec![None; n];
        for l in (0..n).rev() {
            let cell_in = match &cells.get(l + 1).and_then(|c| c.as_ref()) {
                Some(above) => g.concat(&[state.errors[l], g.upsample2(above.h)?], 0)?,
                None => state.errors[l],
            };
            cells[l] = Some(self.cells[l].step(b, cell_in, &state.cells[l], mask)?);
        }
        let cells: Vec<CellState> = cells.into_iter().map(|c| c.expect("every layer stepped")).collect();
        let r: Vec<Var> = cells.iter().map(|c| c.h).collect();

        // Bottom-up error propagation.
        let mut a = Vec::with_capacity(n);
        let mut a_hat = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        let prediction = g.mass_norm(g.relu(self.ahat[0].apply(b, r[0])?)?)?;
        for l in 0..n {
            let (al, ahl) = if l == 0 {
                (input.unwrap_or(prediction), prediction)
            } else {
                let al = g.maxpool2(g.relu(self.a[l - 1].apply(b, e[l - 1])?)?)?;
                (al, g.relu(self.ahat[l].apply(b, r[l])?)?)
            };
            let up = g.relu(g.sub(al, ahl)?)?;
            let down = g.relu(g.sub(ahl, al)?)?;
            e.push(g.concat(&[up, down], 0)?);
            a.push(al);
            a_hat.push(ahl);
        }
        let next = StackState {
            cells,
            errors: e.clone(),
            steps: state.steps + 1,
        };
        Ok((
            StepTrace {
                prediction,
                a,
                a_hat,
                e,
                r,
            },
            next,
        ))
    }

    /// Feeds `frames`, then recycles predictions for `p` more steps and
    /// returns those `p` predictions.
    pub fn rollout<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        frames: &[Var],
        p: usize,
        mask: Option<&HeadMask>,
    ) -> Result<Vec<Var>> {
        self.rollout_truncated(b, frames, p, mask, None)
    }

    /// As [`PredNet::rollout`], cutting gradient flow through the recurrent
    /// state every `truncate` steps.
    pub fn rollout_truncated<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        frames: &[Var],
        p: usize,
        mask: Option<&HeadMask>,
        truncate: Option<usize>,
    ) -> Result<Vec<Var>> {
        check_rollout(frames.len(), p)?;
        let g = b.graph();
        let mut state = self.init_state(b)?;
        let mut out = Vec::with_capacity(p);
        for t in 0..frames.len() + p {
            let (trace, next) = self.step(b, frames.get(t).copied(), &state, mask)?;
            if t >= frames.len() {
                out.push(trace.prediction);
            }
            state = match truncate {
                Some(k) if k > 0 && (t + 1) % k == 0 => next.detach(g),
                _ => next,
            };
        }
        Ok(out)
    }
}

fn check_rollout(n: usize, p: usize) -> Result<()> {
    if n == 0 || p == 0 {
        return Err(Error::config(format!(
            "rollout needs at least one input and one predicted frame (got N={n}, P={p})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredRnnConfig {
    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl PredRnnConfig {
    pub fn standard(grid: (usize, usize)) -> Self {
        PredRnnConfig {
            hidden: vec![64; 4],
            kernel: 5,
            patch: 4,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() < 2 {
            return Err(Error::config("PredRNN++ needs at least two layers"));
        }
        if self.hidden.iter().any(|&h| h != self.hidden[0] || h == 0) {
            return Err(Error::config("PredRNN++ layers must share one positive hidden width"));
        }
        let (h, w) = self.grid;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::config(format!(
                "patch size {} does not divide grid {h}×{w}",
                self.patch
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.grid.0 / self.patch, self.grid.1 / self.patch)
    }
}

/// Recurrent state of the PredRNN++ stack.
#[derive(Debug, Clone)]
pub struct PredRnnState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// Spatial memory leaving the top layer at the previous step.
    pub m: Var,
    pub z: Var,
}

impl PredRnnState {
    pub fn detach<T: Scalar>(&self, g: &Graph<T>) -> PredRnnState {
        PredRnnState {
            h: self.h.iter().map(|&v| g.detach(v)).collect(),
            c: self.c.iter().map(|&v| g.detach(v)).collect(),
            m: g.detach(self.m),
            z: g.detach(self.z),
        }
    }
}

/// Causal LSTM stack with a gradient highway between the first two layers.
/// Parameters: `predrnn.cell.{k}.*`, `predrnn.ghu.*`, `predrnn.head.*`.
#[derive(Debug, Clone)]
pub struct PredRnn {
    pub cfg: PredRnnConfig,
    pub cells: Vec<CausalLstmCell>,
    pub ghu: GhuCell,
    head: ConvParams,
}

impl PredRnn {
    pub fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, cfg: PredRnnConfig) -> Result<Self> {
        cfg.validate()?;
        let depth = FRAME_CHANNELS * cfg.patch * cfg.patch;
        let d = cfg.hidden[0];
        let cells = (0..cfg.hidden.len())
            .map(|k| {
                let c_in = if k == 0 { depth } else { d };
                CausalLstmCell::new(store, init, &format!("predrnn.cell.{k}"), c_in, d, cfg.kernel)
            })
            .collect::<Result<Vec<_>>>()?;
        let ghu = GhuCell::new(store, init, "predrnn.ghu", d, cfg.kernel)?;
        let head = ConvParams::new(store, init, "predrnn.head", d, depth, 1, true);
        Ok(PredRnn { cfg, cells, ghu, head })
    }

    pub fn init_state<T: Scalar>(&self, g: &Graph<T>) -> PredRnnState {
        let d = self.cfg.hidden[0];
        let (h, w) = self.cfg.patch_grid();
        let z = || g.zeros(&[d, h, w]);
        let n = self.cells.len();
        PredRnnState {
            h: (0..n).map(|_| z()).collect(),
            c: (0..n).map(|_| z()).collect(),
            m: z(),
            z: z(),
        }
    }

    /// Consumes frame `x_t` and returns the predicted `x_{t+1}`.
    pub fn step<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, state: &PredRnnState) -> Result<(Var, PredRnnState)> {
        let g = b.graph();
        let (h, w) = self.cfg.grid;
        if g.shape(x) != [FRAME_CHANNELS, h, w] {
            return Err(Error::shape(format!(
                "frame {:?}, expected [{FRAME_CHANNELS}, {h}, {w}]",
                g.shape(x)
            )));
        }
        let mut input = g.space_to_depth(x, self.cfg.patch)?;
        let mut m = state.m;
        let mut next_h = Vec::with_capacity(self.cells.len());
        let mut next_c = Vec::with_capacity(self.cells.len());
        let mut z = state.z;
        for (k, cell) in self.cells.iter().enumerate() {
            let out = cell.step(b, input, state.h[k], state.c[k], m)?;
            m = out.m;
            next_h.push(out.h);
            next_c.push(out.c);
            input = if k == 0 {
                z = self.ghu.step(b, out.h, state.z)?;
                z
            } else {
                out.h
            };
        }
        let top = *next_h.last().expect("non-empty stack");
        let frame = g.depth_to_space(self.head.apply(b, top)?, self.cfg.patch)?;
        let prediction = g.mass_norm(frame)?;
        Ok((
            prediction,
            PredRnnState {
                h: next_h,
                c: next_c,
                m,
                z,
            },
        ))
    }

    pub fn rollout<T: Scalar>(&self, b: &Bound<'_, T>, frames: &[Var], p: usize) -> Result<Vec<Var>> {
        self.rollout_truncated(b, frames, p, None)
    }

    /// Step `t` consumes frame `t` (or the previous prediction once the
    /// frames run out) and predicts frame `t + 1`.
    pub fn rollout_truncated<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        frames: &[Var],
        p: usize,
        truncate: Option<usize>,
    ) -> Result<Vec<Var>> {
        check_rollout(frames.len(), p)?;
        let g = b.graph();
        let n = frames.len();
        let mut state = self.init_state(g);
        let mut out = Vec::with_capacity(p);
        let mut prev = None;
        for t in 0..n + p - 1 {
            let x = frames.get(t).copied().or(prev).expect("prediction available after inputs");
            let (pred, next) = self.step(b, x, &state)?;
            if t + 1 >= n {
                out.push(pred);
            }
            prev = Some(pred);
            state = match truncate {
                Some(k) if k > 0 && (t + 1) % k == 0 => next.detach(g),
                _ => next,
            };
        }
        Ok(out)
    }
}

/// Architecture description stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Prednet(StackConfig),
    Predrnn(PredRnnConfig),
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        match self {
            ModelConfig::Prednet(c) => c.grid,
            ModelConfig::Predrnn(c) => c.grid,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    PredNet(PredNet),
    PredRnn(PredRnn),
}

impl Model {
    /// Builds the model and freshly initialised parameters.
    pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let model = match cfg {
            ModelConfig::Prednet(c) => Model::PredNet(PredNet::new(&mut store, &mut init, c.clone())?),
            ModelConfig::Predrnn(c) => Model::PredRnn(PredRnn::new(&mut store, &mut init, c.clone())?),
        };
        Ok((model, store))
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::PredNet(m) => ModelConfig::Prednet(m.cfg.clone()),
            Model::PredRnn(m) => ModelConfig::Predrnn(m.cfg.clone()),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config().grid()
    }

    /// Head count of the attention layers, if any.
    pub fn attention_heads(&self) -> Option<usize> {
        match self {
            Model::PredNet(m) => m.cells.iter().find_map(|c| c.n_heads()),
            Model::PredRnn(_) => None,
        }
    }

    pub fn rollout<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        frames: &[Var],
        p: usize,
        mask: Option<&HeadMask>,
    ) -> Result<Vec<Var>> {
        self.rollout_truncated(b, frames, p, mask, None)
    }

    pub fn rollout_truncated<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        frames: &[Var],
        p: usize,
        mask: Option<&HeadMask>,
        truncate: Option<usize>,
    ) -> Result<Vec<Var>> {
        match self {
            Model::PredNet(m) => m.rollout_truncated(b, frames, p, mask, truncate),
            Model::PredRnn(m) => {
                if mask.is_some() {
                    return Err(Error::config("PredRNN++ has no attention heads to mask"));
                }
                m.rollout_truncated(b, frames, p, truncate)
            }
        }
    }

    /// Inference on plain tensors.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        frames: &[Tensor<T>],
        p: usize,
        mask: Option<&HeadMask>,
    ) -> Result<Vec<Tensor<T>>> {
        let g = Graph::new();
        let b = params.bind(&g, false);
        let inputs: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let preds = self.rollout(&b, &inputs, p, mask)?;
        Ok(preds.iter().map(|&v| g.value(v).clone()).collect())
    }
}
