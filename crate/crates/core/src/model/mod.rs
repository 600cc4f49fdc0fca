//! Recurrent autoregressive motion model.
//!
//! A velocity token is embedded (affine + ReLU), advanced through a single
//! LSTM cell, and read out by one softmax head per velocity component. The
//! heads give the categorical distribution of the next velocity's cluster
//! indices; an auxiliary linear head regresses a continuous residual that is
//! only used as a training signal.

mod io;
mod train;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis as NdAxis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::ClusterIndexQuad;
use crate::error::{Error, Result};
use crate::geometry::{Axis, VelocityDelta};

pub use train::{
    jitter, loss_and_gradient, train, Batch, TrainOutcome, TrainSchedule, TrainSequence,
};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Velocity components per token (4 for boxes).
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Clusters per component; must equal the codebook's `K`.
    pub num_clusters: usize,
}

impl ModelConfig {
    pub fn new(hidden_dim: usize, num_clusters: usize) -> Self {
        ModelConfig {
            input_dim: 4,
            hidden_dim,
            num_clusters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_clusters == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.input_dim != 4 {
            return Err(Error::Config(format!(
                "box tracking uses 4 velocity components, got input_dim {}",
                self.input_dim
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(512, 1024)
    }
}

/// Trainable tensors. Row-vector convention: activations are `(batch, n)`
/// and every weight maps by right multiplication.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed_w: Array2<f64>,
    pub embed_b: Array2<f64>,
    /// Input-to-gate weights, gate blocks ordered input, forget, candidate, output.
    pub gate_wx: Array2<f64>,
    pub gate_wh: Array2<f64>,
    pub gate_b: Array2<f64>,
    /// All component heads side by side: columns `c*K..(c+1)*K` belong to component `c`.
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
    pub residual_w: Array2<f64>,
    pub residual_b: Array2<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, k) = (cfg.input_dim, cfg.hidden_dim, cfg.num_clusters);
        Params {
            embed_w: Array2::zeros((d, h)),
            embed_b: Array2::zeros((1, h)),
            gate_wx: Array2::zeros((h, 4 * h)),
            gate_wh: Array2::zeros((h, 4 * h)),
            gate_b: Array2::zeros((1, 4 * h)),
            head_w: Array2::zeros((h, d * k)),
            head_b: Array2::zeros((1, d * k)),
            residual_w: Array2::zeros((h, d)),
            residual_b: Array2::zeros((1, d)),
        }
    }

    /// Uniform(±1/sqrt(hidden)) weights, forget-gate bias 1.
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cfg.hidden_dim as f64).sqrt();
        let mut p = Params::zeros(cfg);
        for t in p.tensors_mut() {
            t.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        let h = cfg.hidden_dim;
        p.gate_b.slice_mut(s![.., h..2 * h]).fill(1.0);
        p
    }

    pub fn tensors(&self) -> [&Array2<f64>; 9] {
        [
            &self.embed_w,
            &self.embed_b,
            &self.gate_wx,
            &self.gate_wh,
            &self.gate_b,
            &self.head_w,
            &self.head_b,
            &self.residual_w,
            &self.residual_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.gate_wx,
            &mut self.gate_wh,
            &mut self.gate_b,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.residual_w,
            &mut self.residual_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Params::zeros(cfg);
        for (a, b) in self.tensors().iter().zip(want.tensors()) {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!(
                    "tensor shape {:?}, config expects {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Trained model: parameters plus the fixed input standardization and the
/// checksum of the codebook the heads were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: Params,
    /// Per-component multiplier applied to raw velocities before embedding.
    pub input_scale: Vec<f64>,
    pub codebook_checksum: u64,
}

impl ModelWeights {
    pub fn zeros(config: ModelConfig) -> Self {
        ModelWeights {
            params: Params::zeros(&config),
            input_scale: vec![1.0; config.input_dim],
            codebook_checksum: 0,
            config,
        }
    }

    pub fn random(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelWeights {
            params: Params::random(&config, &mut rng),
            input_scale: vec![1.0; config.input_dim],
            codebook_checksum: 0,
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_shapes(&self.config)?;
        if self.input_scale.len() != self.config.input_dim
            || self.input_scale.iter().any(|s| !s.is_finite() || *s <= 0.0)
        {
            return Err(Error::Shape("input scale must be positive per component".into()));
        }
        if !self.params.is_finite() {
            return Err(Error::NumericOverflow("model weights"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.config.num_clusters
    }
}

/// Hidden and cell vectors of the recurrent cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub steps_consumed: usize,
}

/// One categorical distribution per velocity component.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionQuad {
    probs: Vec<Vec<f64>>,
}

impl DistributionQuad {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.len() != 4 || probs.iter().any(|p| p.is_empty() || p.len() != probs[0].len()) {
            return Err(Error::Shape("expected four equal-length distributions".into()));
        }
        for p in &probs {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("not a distribution (sum {sum})")));
            }
        }
        Ok(DistributionQuad { probs })
    }

    pub fn uniform(k: usize) -> Self {
        DistributionQuad {
            probs: vec![vec![1.0 / k as f64; k]; 4],
        }
    }

    pub fn k(&self) -> usize {
        self.probs[0].len()
    }

    pub fn component(&self, axis: Axis) -> &[f64] {
        &self.probs[axis.index()]
    }

    pub fn argmax(&self) -> ClusterIndexQuad {
        let mut out = [0; 4];
        for (o, p) in out.iter_mut().zip(&self.probs) {
            // first maximum wins
            *o = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
        }
        ClusterIndexQuad::from_array(out)
    }
}

pub fn init_state(weights: &ModelWeights) -> RecurrentState {
    let h = weights.config.hidden_dim;
    RecurrentState {
        hidden: vec![0.0; h],
        cell: vec![0.0; h],
        steps_consumed: 0,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached activations of one batched cell step; the trainer keeps these for
/// backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub scaled_input: Array2<f64>,
    pub embed_pre: Array2<f64>,
    pub embed: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub c_prev: Array2<f64>,
    /// Post-nonlinearity gates `[i, f, g, o]`.
    pub gates: Array2<f64>,
    pub c: Array2<f64>,
    pub tanh_c: Array2<f64>,
    pub h: Array2<f64>,
    /// Softmax probabilities, `(batch, input_dim * K)`.
    pub probs: Array2<f64>,
    pub residual: Array2<f64>,
}

/// Batched forward step over `(batch, input_dim)` raw velocities.
pub(crate) fn forward_step(
    weights: &ModelWeights,
    input: ArrayView2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
) -> StepCache {
    let p = &weights.params;
    let hd = weights.config.hidden_dim;
    let k = weights.config.num_clusters;
    let scale = Array1::from(weights.input_scale.clone());
    let scaled_input = &input * &scale;
    let embed_pre = scaled_input.dot(&p.embed_w) + &p.embed_b;
    let embed = embed_pre.mapv(|v| v.max(0.0));
    let mut gates = embed.dot(&p.gate_wx) + h_prev.dot(&p.gate_wh) + &p.gate_b;
    gates.slice_mut(s![.., 0..2 * hd]).mapv_inplace(sigmoid);
    gates.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(f64::tanh);
    gates.slice_mut(s![.., 3 * hd..4 * hd]).mapv_inplace(sigmoid);
    let i = gates.slice(s![.., 0..hd]);
    let f = gates.slice(s![.., hd..2 * hd]);
    let g = gates.slice(s![.., 2 * hd..3 * hd]);
    let o = gates.slice(s![.., 3 * hd..4 * hd]);
    let c = &f * &c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let mut probs = h.dot(&p.head_w) + &p.head_b;
    for mut row in probs.axis_iter_mut(NdAxis(0)) {
        for comp in 0..weights.config.input_dim {
            let mut seg = row.slice_mut(s![comp * k..(comp + 1) * k]);
            let max = seg.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            seg.mapv_inplace(|v| (v - max).exp());
            let sum = seg.sum();
            seg.mapv_inplace(|v| v / sum);
        }
    }
    let residual = h.dot(&p.residual_w) + &p.residual_b;
    StepCache {
        scaled_input,
        embed_pre,
        embed,
        h_prev,
        c_prev,
        gates,
        c,
        tanh_c,
        h,
        probs,
        residual,
    }
}

/// Advances `state` by one velocity token and returns the predictive
/// distribution of the next token. Pure.
pub fn step(
    weights: &ModelWeights,
    state: &RecurrentState,
    delta: &VelocityDelta,
) -> Result<(RecurrentState, DistributionQuad)> {
    let mut out = step_batch(weights, &[state], std::slice::from_ref(delta))?;
    Ok(out.pop().expect("one state in, one out"))
}

/// [`step`] for several independent states at once, one velocity each.
pub fn step_batch(
    weights: &ModelWeights,
    states: &[&RecurrentState],
    deltas: &[VelocityDelta],
) -> Result<Vec<(RecurrentState, DistributionQuad)>> {
    let hd = weights.config.hidden_dim;
    let n = states.len();
    if deltas.len() != n {
        return Err(Error::Shape(format!("{n} states but {} velocities", deltas.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut input = Array2::zeros((n, 4));
    let mut h_prev = Array2::zeros((n, hd));
    let mut c_prev = Array2::zeros((n, hd));
    for (r, (st, d)) in states.iter().zip(deltas).enumerate() {
        if st.hidden.len() != hd || st.cell.len() != hd {
            return Err(Error::Shape(format!(
                "state has {} hidden units, model has {hd}",
                st.hidden.len()
            )));
        }
        input.row_mut(r).assign(&ArrayView1::from(&d.to_array()[..]));
        h_prev.row_mut(r).assign(&ArrayView1::from(&st.hidden[..]));
        c_prev.row_mut(r).assign(&ArrayView1::from(&st.cell[..]));
    }
    let cache = forward_step(weights, input.view(), h_prev, c_prev);
    if cache.h.iter().chain(cache.c.iter()).any(|v| !v.is_finite())
        || cache.probs.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NumericOverflow("recurrent step"));
    }
    let k = weights.config.num_clusters;
    Ok((0..n)
        .map(|r| {
            let row = cache.probs.row(r);
            let probs = (0..4)
                .map(|c| row.slice(s![c * k..(c + 1) * k]).to_vec())
                .collect();
            (
                RecurrentState {
                    hidden: cache.h.row(r).to_vec(),
                    cell: cache.c.row(r).to_vec(),
                    steps_consumed: states[r].steps_consumed + 1,
                },
                DistributionQuad { probs },
            )
        })
        .collect())
}

/// Sum over components of the floored log-probability of the target indices.
pub fn log_likelihood(dist: &DistributionQuad, target: &ClusterIndexQuad) -> f64 {
    dist.probs
        .iter()
        .zip(target.to_array())
        .map(|(p, i)| p.get(i).copied().unwrap_or(0.0).max(PROB_FLOOR).ln())
        .sum()
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            last_positive = i;
        }
        acc += v;
        if u < acc {
            return i;
        }
    }
    // round-off left u beyond the accumulated mass
    last_positive
}

/// Independent multinomial draw per component, in x, y, w, h order.
pub fn sample(dist: &DistributionQuad, rng: &mut impl Rng) -> ClusterIndexQuad {
    let mut out = [0; 4];
    for (o, p) in out.iter_mut().zip(&dist.probs) {
        *o = sample_categorical(p, rng);
    }
    ClusterIndexQuad::from_array(out)
}
