//! The CRNN: three conv/BN/ReLU/pool blocks, a bidirectional GRU with a
//! linear output projection, a batch-normalized residual branch, and a
//! sigmoid head emitting one (activity, onset distance, offset distance)
//! triplet per class and step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub context_frames: usize,
    pub n_classes: usize,
    pub filters: usize,
    pub hidden: usize,
    pub pool_sizes: Vec<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            context_frames: 512,
            n_classes: 4,
            filters: 256,
            hidden: 256,
            pool_sizes: vec![5, 4, 2],
            kernel_size: 5,
            dropout: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_mels == 0 || self.context_frames == 0 {
            return bad("n_mels and context_frames must be positive".into());
        }
        if self.filters == 0 || self.hidden == 0 || self.n_classes == 0 {
            return bad("filters, hidden and n_classes must be at least 1".into());
        }
        if self.pool_sizes.is_empty() || self.pool_sizes.iter().product::<usize>() != self.n_mels {
            return bad(format!(
                "pool sizes {:?} must reduce {} mel bins to 1",
                self.pool_sizes, self.n_mels
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.pool_sizes.len()
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl BnState {
    fn new(name: String, channels: usize) -> Self {
        Self {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    /// The first batch seeds the running values; later ones are blended in
    /// with momentum 0.99.
    pub fn update(&mut self, stats: &BatchStats) {
        if self.updates == 0 {
            self.mean.clone_from(&stats.mean);
            self.var.clone_from(&stats.var);
        } else {
            for (r, b) in self.mean.iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.var.iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        self.updates += 1;
    }

    pub fn stats(&self) -> Result<BatchStats> {
        if self.updates == 0 {
            return Err(Error::NoRunningStats(self.name.clone()));
        }
        Ok(BatchStats {
            mean: self.mean.clone(),
            var: self.var.clone(),
        })
    }
}

/// Trainable tensors in a fixed order, plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<(String, Tensor)>,
    pub bn: Vec<BnState>,
}

impl ModelParams {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.tensors[i].1)
    }

    pub fn bn_state(&self, name: &str) -> Option<&BnState> {
        self.bn.iter().find(|b| b.name == name)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Names and shapes of every trainable tensor.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (f, h, k, c) = (cfg.filters, cfg.hidden, cfg.kernel_size, cfg.n_classes);
    let mut out = Vec::new();
    for i in 0..cfg.n_blocks() {
        let c_in = if i == 0 { 1 } else { f };
        out.push((format!("conv{}.kernel", i + 1), vec![f, c_in, k, k]));
        out.push((format!("conv{}.bias", i + 1), vec![f]));
        out.push((format!("bn{}.gamma", i + 1), vec![f]));
        out.push((format!("bn{}.beta", i + 1), vec![f]));
    }
    for dir in ["gru_fwd", "gru_bwd"] {
        for gate in ["z", "r", "h"] {
            out.push((format!("{dir}.w_{gate}"), vec![f, h]));
            out.push((format!("{dir}.u_{gate}"), vec![h, h]));
            out.push((format!("{dir}.b_{gate}"), vec![h]));
        }
    }
    out.push(("rnn_out.weight".into(), vec![2 * h, 2 * h]));
    out.push(("rnn_out.bias".into(), vec![2 * h]));
    out.push(("residual.weight".into(), vec![f, 2 * h]));
    out.push(("residual.bias".into(), vec![2 * h]));
    out.push(("bn_res.gamma".into(), vec![2 * h]));
    out.push(("bn_res.beta".into(), vec![2 * h]));
    out.push(("head.weight".into(), vec![4 * h, 3 * c]));
    out.push(("head.bias".into(), vec![3 * c]));
    out
}

pub fn bn_names(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = (0..cfg.n_blocks())
        .map(|i| (format!("bn{}", i + 1), cfg.filters))
        .collect();
    out.push(("bn_res".into(), 2 * cfg.hidden));
    out
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
        [i, o] => (*i, *o),
        _ => (1, 1),
    }
}

/// Glorot-uniform weights, zero biases, unit BN scales.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".gamma") {
                Tensor::filled(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let (fan_in, fan_out) = fans(&shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                Tensor {
                    shape,
                    data: (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
                }
            };
            (name, t)
        })
        .collect();
    let bn = bn_names(cfg)
        .into_iter()
        .map(|(n, c)| BnState::new(n, c))
        .collect();
    Ok(ModelParams { tensors, bn })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout masks drawn from the seed.
    Train {
        dropout_seed: u64,
    },
    Infer,
}

/// Network output for one segment: `values[(t * C + c) * 3 + k]` with
/// k = 0 activity, 1 onset distance, 2 offset distance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    pub t_len: usize,
    pub n_classes: usize,
    pub values: Vec<f64>,
}

impl PredictionSequence {
    pub fn new(t_len: usize, n_classes: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), t_len * n_classes * 3);
        Self {
            t_len,
            n_classes,
            values,
        }
    }

    #[inline]
    pub fn y(&self, t: usize, c: usize) -> f64 {
        self.values[(t * self.n_classes + c) * 3]
    }

    #[inline]
    pub fn p(&self, t: usize, c: usize) -> f64 {
        self.values[(t * self.n_classes + c) * 3 + 1]
    }

    #[inline]
    pub fn q(&self, t: usize, c: usize) -> f64 {
        self.values[(t * self.n_classes + c) * 3 + 2]
    }
}

/// Forward-pass bookkeeping shared by the sub-network builders.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub tape: Tape,
    /// One tape leaf per entry of `params.tensors`.
    pub param_vars: Vec<Var>,
    pub batch: usize,
    mode: Mode,
    dropout_site: u64,
    /// Train-mode batch statistics, keyed by BN name.
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl<'a> Net<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        params: &'a ModelParams,
        batch: usize,
        mode: Mode,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let param_vars = params
            .tensors
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params,
            tape,
            param_vars,
            batch,
            mode,
            dropout_site: 0,
            batch_stats: Vec::new(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index(name)
            .map(|i| self.param_vars[i])
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let site = self.dropout_site;
        self.dropout_site += 1;
        match self.mode {
            Mode::Train { dropout_seed } if self.cfg.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                rng.set_stream(site);
                self.tape.dropout(x, self.cfg.dropout, Some(&mut rng))
            }
            _ => Ok(x),
        }
    }

    fn batchnorm(&mut self, x: Var, name: &str, layout: BnLayout) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train { .. } => {
                let (out, stats) = self.tape.batchnorm_train(x, gamma, beta, layout)?;
                self.batch_stats.push((name.to_string(), stats));
                Ok(out)
            }
            Mode::Infer => {
                let stats = self
                    .params
                    .bn_state(name)
                    .ok_or_else(|| Error::NoRunningStats(name.to_string()))?
                    .stats()?;
                self.tape.batchnorm_infer(x, gamma, beta, layout, &stats)
            }
        }
    }

    /// Conv blocks on `[B, 1, M, T]`. Returns the per-block pooled maps and
    /// the features reshaped to rows `b * T + t` of width F.
    pub fn conv_block_forward(&mut self, input: Var) -> Result<ConvBlockOutput> {
        let (m, t, f) = (self.cfg.n_mels, self.cfg.context_frames, self.cfg.filters);
        if self.tape.value(input).shape != [self.batch, 1, m, t] {
            return Err(Error::ShapeMismatch(format!(
                "expected input [{}, 1, {m}, {t}], got {:?}",
                self.batch,
                self.tape.value(input).shape
            )));
        }
        let mut cur = input;
        let mut height = m;
        let mut pooled = Vec::new();
        for (i, &pool) in self.cfg.pool_sizes.clone().iter().enumerate() {
            let k = self.var(&format!("conv{}.kernel", i + 1))?;
            let b = self.var(&format!("conv{}.bias", i + 1))?;
            cur = self.tape.conv2d_same(cur, k, b)?;
            let layout = BnLayout {
                outer: self.batch,
                channels: f,
                inner: height * t,
            };
            cur = self.batchnorm(cur, &format!("bn{}", i + 1), layout)?;
            cur = self.tape.relu(cur)?;
            cur = self.tape.maxpool_spectral(cur, pool)?;
            cur = self.dropout(cur)?;
            height /= pool;
            pooled.push(cur);
        }
        let squeezed = self.tape.reshape(cur, vec![self.batch, f, t])?;
        let by_time = self.tape.transpose_last2(squeezed)?;
        let x_rows = self.tape.reshape(by_time, vec![self.batch * t, f])?;
        Ok(ConvBlockOutput { pooled, x_rows })
    }

    /// One GRU update from pre-projected inputs (x·W + b per gate).
    pub fn gru_step(&mut self, dir: &str, xz: Var, xr: Var, xh: Var, h_prev: Var) -> Result<Var> {
        let u_z = self.var(&format!("{dir}.u_z"))?;
        let u_r = self.var(&format!("{dir}.u_r"))?;
        let u_h = self.var(&format!("{dir}.u_h"))?;
        let tape = &mut self.tape;
        let hz = tape.matmul(h_prev, u_z)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let hr = tape.matmul(h_prev, u_r)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h_prev)?;
        let hh = tape.matmul(rh, u_h)?;
        let cand = tape.add(xh, hh)?;
        let cand = tape.tanh(cand)?;
        // (1 − z)⊙h + z⊙h̃  ==  h + z⊙(h̃ − h)
        let diff = tape.sub(cand, h_prev)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h_prev, upd)
    }

    /// Full GRU cell on raw inputs `x_t` `[B, F]` and state `[B, H]`.
    pub fn gru_cell(&mut self, dir: &str, x_t: Var, h_prev: Var) -> Result<Var> {
        let mut proj = Vec::with_capacity(3);
        for gate in ["z", "r", "h"] {
            let w = self.var(&format!("{dir}.w_{gate}"))?;
            let b = self.var(&format!("{dir}.b_{gate}"))?;
            let xw = self.tape.matmul(x_t, w)?;
            proj.push(self.tape.add_bias(xw, b)?);
        }
        self.gru_step(dir, proj[0], proj[1], proj[2], h_prev)
    }

    fn run_direction(&mut self, dir: &str, x_rows: Var, reverse: bool) -> Result<Vec<Var>> {
        let (batch, t_len, h) = (self.batch, self.cfg.context_frames, self.cfg.hidden);
        let mut proj = Vec::with_capacity(3);
        for gate in ["z", "r", "h"] {
            let w = self.var(&format!("{dir}.w_{gate}"))?;
            let b = self.var(&format!("{dir}.b_{gate}"))?;
            let xw = self.tape.matmul(x_rows, w)?;
            proj.push(self.tape.add_bias(xw, b)?);
        }
        let mut state = self.tape.leaf(Tensor::zeros(vec![batch, h]))?;
        let mut states = vec![state; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let rows: Vec<usize> = (0..batch).map(|b| b * t_len + t).collect();
            let xz = self.tape.gather_rows(proj[0], rows.clone())?;
            let xr = self.tape.gather_rows(proj[1], rows.clone())?;
            let xh = self.tape.gather_rows(proj[2], rows)?;
            state = self.gru_step(dir, xz, xr, xh, state)?;
            states[t] = state;
        }
        Ok(states)
    }

    /// z_t = [h^b_t ⊕ h^f_t]·W_z + b_z, rows `b * T + t`, no activation.
    pub fn bigru_forward(&mut self, x_rows: Var) -> Result<Var> {
        let fwd = self.run_direction("gru_fwd", x_rows, false)?;
        let bwd = self.run_direction("gru_bwd", x_rows, true)?;
        let hf = self.tape.interleave_steps(fwd)?;
        let hb = self.tape.interleave_steps(bwd)?;
        let cat = self.tape.concat_cols(hb, hf)?;
        let w = self.var("rnn_out.weight")?;
        let b = self.var("rnn_out.bias")?;
        let z = self.tape.matmul(cat, w)?;
        self.tape.add_bias(z, b)
    }

    /// a_t = relu(BN(x_t·W_x + b_x)) ⊕ z_t.
    pub fn residual_combine(&mut self, x_rows: Var, z: Var) -> Result<Var> {
        let w = self.var("residual.weight")?;
        let b = self.var("residual.bias")?;
        let proj = self.tape.matmul(x_rows, w)?;
        let proj = self.tape.add_bias(proj, b)?;
        let rows = self.tape.value(proj).shape[0];
        let layout = BnLayout {
            outer: rows,
            channels: 2 * self.cfg.hidden,
            inner: 1,
        };
        let proj = self.batchnorm(proj, "bn_res", layout)?;
        let proj = self.tape.relu(proj)?;
        let proj = self.dropout(proj)?;
        self.tape.concat_cols(proj, z)
    }

    /// sigmoid(a_t·W_a + b_a), class-major triplets per row.
    pub fn output_head(&mut self, a: Var) -> Result<Var> {
        let w = self.var("head.weight")?;
        let b = self.var("head.bias")?;
        let o = self.tape.matmul(a, w)?;
        let o = self.tape.add_bias(o, b)?;
        self.tape.sigmoid(o)
    }

    /// Whole network on a batch of segments, `inputs` laid out `[B, M, T]`.
    pub fn forward(&mut self, inputs: &[f64]) -> Result<Var> {
        let (m, t) = (self.cfg.n_mels, self.cfg.context_frames);
        let input = self
            .tape
            .leaf(Tensor::new(vec![self.batch, 1, m, t], inputs.to_vec())?)?;
        let conv = self.conv_block_forward(input)?;
        let z = self.bigru_forward(conv.x_rows)?;
        let z = self.dropout(z)?;
        let a = self.residual_combine(conv.x_rows, z)?;
        self.output_head(a)
    }

    /// Splits a `[B * T, 3C]` output into per-segment sequences.
    pub fn predictions(&self, output: Var) -> Vec<PredictionSequence> {
        let (t, c) = (self.cfg.context_frames, self.cfg.n_classes);
        self.tape
            .value(output)
            .data
            .chunks_exact(t * c * 3)
            .map(|chunk| PredictionSequence::new(t, c, chunk.to_vec()))
            .collect()
    }
}

pub struct ConvBlockOutput {
    pub pooled: Vec<Var>,
    pub x_rows: Var,
}

/// Inference on a batch of `[M, T]` segments.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    inputs: &[f64],
    batch: usize,
) -> Result<Vec<PredictionSequence>> {
    let mut net = Net::new(cfg, params, batch, Mode::Infer)?;
    let out = net.forward(inputs)?;
    Ok(net.predictions(out))
}

/// Copies frames `start .. start + T` of frame-major features into `[M, T]`,
/// zero beyond the recording.
pub fn segment_input(features: &[f64], n_mels: usize, start: usize, t_len: usize) -> Vec<f64> {
    let n_frames = features.len() / n_mels;
    let mut out = vec![0.0; n_mels * t_len];
    for t in 0..t_len {
        let n = start + t;
        if n >= n_frames {
            break;
        }
        for m in 0..n_mels {
            out[m * t_len + t] = features[n * n_mels + m];
        }
    }
    out
}
