//! Negative log-likelihood training with backpropagation through time.

use ndarray::{s, Array2, Axis as NdAxis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_step, sample_categorical, ModelConfig, ModelWeights, Params, StepCache};
use crate::codebook::{ClusterIndexQuad, Codebook};
use crate::error::{Error, Result};
use crate::geometry::{velocity, BoundingBox, FrameGeometry, VelocityDelta};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub teacher_forcing_prob: f64,
    /// Teacher forcing only applies to steps past this fraction of a window.
    pub teacher_forcing_onset_fraction: f64,
    /// Uniform box jitter as a fraction of box size.
    pub jitter_fraction: f64,
    /// Longest velocity window cut from a training sequence.
    pub window: usize,
    /// Weight of the auxiliary residual regression term.
    pub residual_weight: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            iterations: 5_000,
            batch_size: 256,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            teacher_forcing_prob: 0.2,
            teacher_forcing_onset_fraction: 0.7,
            jitter_fraction: 0.02,
            window: 20,
            residual_weight: 0.1,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.iterations == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config(
                "iterations, batch_size and window must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !unit(self.teacher_forcing_prob)
            || !unit(self.teacher_forcing_onset_fraction)
            || !(0.0..0.5).contains(&self.jitter_fraction)
            || !(self.residual_weight >= 0.0)
        {
            return Err(Error::Config("training probabilities/fractions out of range".into()));
        }
        Ok(())
    }
}

/// One ground-truth trajectory: consecutive-frame boxes of a single object.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub boxes: Vec<BoundingBox>,
    pub frame: FrameGeometry,
}

/// Equal-length mini-batch. Step `t` feeds `inputs[t]` and predicts the
/// token of `targets[t]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Array2<f64>>,
    pub targets: Vec<Array2<f64>>,
    pub target_idx: Vec<Vec<ClusterIndexQuad>>,
}

impl Batch {
    /// Builds a batch from velocity sequences of equal length. The first
    /// input of every row is the zero seed token.
    pub fn from_velocities(seqs: &[Vec<VelocityDelta>], codebook: &Codebook) -> Result<Self> {
        let len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("batch rows must be non-empty and equal length".into()));
        }
        let b = seqs.len();
        let mut inputs = Vec::with_capacity(len);
        let mut targets = Vec::with_capacity(len);
        let mut target_idx = Vec::with_capacity(len);
        for t in 0..len {
            let mut inp = Array2::zeros((b, 4));
            let mut tgt = Array2::zeros((b, 4));
            let mut idx = Vec::with_capacity(b);
            for (r, s) in seqs.iter().enumerate() {
                if t > 0 {
                    inp.row_mut(r).assign(&ndarray::arr1(&s[t - 1].to_array()));
                }
                tgt.row_mut(r).assign(&ndarray::arr1(&s[t].to_array()));
                idx.push(codebook.quantize(&s[t]));
            }
            inputs.push(inp);
            targets.push(tgt);
            target_idx.push(idx);
        }
        Ok(Batch {
            inputs,
            targets,
            target_idx,
        })
    }

    fn rows(&self) -> usize {
        self.inputs[0].nrows()
    }
}

struct TeacherForcing<'a> {
    prob: f64,
    onset_step: usize,
    codebook: &'a Codebook,
}

fn forward(
    weights: &ModelWeights,
    batch: &mut Batch,
    mut tf: Option<(&TeacherForcing, &mut ChaCha8Rng)>,
) -> Vec<StepCache> {
    let hd = weights.config.hidden_dim;
    let k = weights.config.num_clusters;
    let b = batch.rows();
    let mut h = Array2::zeros((b, hd));
    let mut c = Array2::zeros((b, hd));
    let mut caches: Vec<StepCache> = Vec::with_capacity(batch.inputs.len());
    for t in 0..batch.inputs.len() {
        if let (Some((forcing, rng)), Some(prev)) = (tf.as_mut(), caches.last()) {
            if t >= forcing.onset_step {
                for r in 0..b {
                    if rng.gen::<f64>() < forcing.prob {
                        let probs = prev.probs.row(r);
                        let mut q = [0usize; 4];
                        for (comp, qc) in q.iter_mut().enumerate() {
                            let seg = probs.slice(s![comp * k..(comp + 1) * k]);
                            *qc = sample_categorical(seg.as_slice().unwrap_or(&seg.to_vec()), rng);
                        }
                        let own = forcing
                            .codebook
                            .decode(&ClusterIndexQuad::from_array(q))
                            .expect("sampled index within K");
                        batch.inputs[t]
                            .row_mut(r)
                            .assign(&ndarray::arr1(&own.to_array()));
                    }
                }
            }
        }
        let cache = forward_step(weights, batch.inputs[t].view(), h, c);
        h = cache.h.clone();
        c = cache.c.clone();
        caches.push(cache);
    }
    caches
}

fn backward(weights: &ModelWeights, batch: &Batch, caches: &[StepCache], residual_weight: f64) -> (f64, Params) {
    let cfg = &weights.config;
    let (d, hd, k) = (cfg.input_dim, cfg.hidden_dim, cfg.num_clusters);
    let p = &weights.params;
    let b = batch.rows();
    let n = (b * caches.len()) as f64;
    let inv = 1.0 / (d as f64 * n);
    let scale = ndarray::Array1::from(weights.input_scale.clone());
    let mut grad = Params::zeros(cfg);
    let mut loss = 0.0;
    let mut dh_next: Array2<f64> = Array2::zeros((b, hd));
    let mut dc_next: Array2<f64> = Array2::zeros((b, hd));

    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        // softmax cross-entropy per component head
        let mut dlogits = cache.probs.clone();
        for (r, q) in batch.target_idx[t].iter().enumerate() {
            for (comp, &qi) in q.to_array().iter().enumerate() {
                let col = comp * k + qi;
                loss -= cache.probs[[r, col]].ln() * inv;
                dlogits[[r, col]] -= 1.0;
            }
        }
        dlogits.mapv_inplace(|v| v * inv);
        // residual regression in standardized units
        let err = &cache.scaled_input + &cache.residual - &(&batch.targets[t] * &scale);
        loss += residual_weight * inv * err.mapv(|e| e * e).sum();
        let dres = err.mapv(|e| 2.0 * residual_weight * inv * e);

        grad.head_w += &cache.h.t().dot(&dlogits);
        grad.head_b += &dlogits.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
        grad.residual_w += &cache.h.t().dot(&dres);
        grad.residual_b += &dres.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));

        let dh = dlogits.dot(&p.head_w.t()) + dres.dot(&p.residual_w.t()) + &dh_next;
        let i = cache.gates.slice(s![.., 0..hd]);
        let f = cache.gates.slice(s![.., hd..2 * hd]);
        let g = cache.gates.slice(s![.., 2 * hd..3 * hd]);
        let o = cache.gates.slice(s![.., 3 * hd..4 * hd]);

        let mut dc = dc_next.clone();
        Zip::from(&mut dc)
            .and(&dh)
            .and(&o)
            .and(&cache.tanh_c)
            .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (1.0 - tc * tc));

        let mut dgates = Array2::zeros((b, 4 * hd));
        Zip::from(dgates.slice_mut(s![.., 0..hd]))
            .and(&dc)
            .and(&g)
            .and(&i)
            .for_each(|out, &dc, &g, &i| *out = dc * g * i * (1.0 - i));
        Zip::from(dgates.slice_mut(s![.., hd..2 * hd]))
            .and(&dc)
            .and(&cache.c_prev)
            .and(&f)
            .for_each(|out, &dc, &cp, &f| *out = dc * cp * f * (1.0 - f));
        Zip::from(dgates.slice_mut(s![.., 2 * hd..3 * hd]))
            .and(&dc)
            .and(&i)
            .and(&g)
            .for_each(|out, &dc, &i, &g| *out = dc * i * (1.0 - g * g));
        Zip::from(dgates.slice_mut(s![.., 3 * hd..4 * hd]))
            .and(&dh)
            .and(&cache.tanh_c)
            .and(&o)
            .for_each(|out, &dh, &tc, &o| *out = dh * tc * o * (1.0 - o));
        dc_next = &dc * &f;

        grad.gate_wx += &cache.embed.t().dot(&dgates);
        grad.gate_wh += &cache.h_prev.t().dot(&dgates);
        grad.gate_b += &dgates.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
        dh_next = dgates.dot(&p.gate_wh.t());

        let mut dembed = dgates.dot(&p.gate_wx.t());
        Zip::from(&mut dembed)
            .and(&cache.embed_pre)
            .for_each(|de, &pre| {
                if pre <= 0.0 {
                    *de = 0.0
                }
            });
        grad.embed_w += &cache.scaled_input.t().dot(&dembed);
        grad.embed_b += &dembed.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
    }
    (loss, grad)
}

/// Mean loss of `batch` (per-component NLL plus weighted residual error)
/// and its exact gradient. Inputs are used as given.
pub fn loss_and_gradient(weights: &ModelWeights, batch: &Batch, residual_weight: f64) -> (f64, Params) {
    let mut batch = batch.clone();
    let caches = forward(weights, &mut batch, None);
    backward(weights, &batch, &caches, residual_weight)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mini-batch loss per iteration.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn new(cfg: &ModelConfig) -> Self {
        Adam {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut Params, grad: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub(crate) fn clip_global_norm(grad: &mut Params, max_norm: f64) -> f64 {
    let norm = grad
        .tensors()
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for t in grad.tensors_mut() {
            t.mapv_inplace(|v| v * f);
        }
    }
    norm
}

/// Uniform box noise: position by up to `frac` of the box size, size by up
/// to `frac` of itself.
pub fn jitter(b: &BoundingBox, frac: f64, rng: &mut impl Rng) -> BoundingBox {
    if frac == 0.0 {
        return *b;
    }
    let mut u = || rng.gen_range(-frac..=frac);
    BoundingBox {
        x: b.x + u() * b.w,
        y: b.y + u() * b.h,
        w: b.w * (1.0 + u()),
        h: b.h * (1.0 + u()),
    }
}

/// Per-component `1 / std` of the training velocities.
fn input_scale(seqs: &[Vec<VelocityDelta>]) -> Vec<f64> {
    let mut n = 0.0;
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for v in seqs.iter().flatten() {
        n += 1.0;
        for (c, x) in v.to_array().iter().enumerate() {
            sum[c] += x;
            sq[c] += x * x;
        }
    }
    (0..4)
        .map(|c| {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            if var.sqrt() > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// Trains a model on ground-truth trajectories.
pub fn train(
    dataset: &[TrainSequence],
    codebook: &Codebook,
    config: ModelConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    if config.num_clusters != codebook.k() {
        return Err(Error::Config(format!(
            "model has {} clusters, codebook has {}",
            config.num_clusters,
            codebook.k()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut clean = Vec::with_capacity(dataset.len());
    for (i, seq) in dataset.iter().enumerate() {
        if seq.boxes.len() < 3 {
            return Err(Error::Input(format!(
                "training sequence {i} has {} boxes, need at least 3",
                seq.boxes.len()
            )));
        }
        let v = seq
            .boxes
            .windows(2)
            .map(|w| velocity(&w[0], &w[1], &seq.frame))
            .collect::<Result<Vec<_>>>()?;
        clean.push(v);
    }

    // scale inputs by the spread the model will actually see, jitter included
    let mut scale_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    scale_rng.set_stream(1);
    let mut jittered = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let boxes: Vec<BoundingBox> = seq
            .boxes
            .iter()
            .map(|b| jitter(b, schedule.jitter_fraction, &mut scale_rng))
            .collect();
        jittered.push(
            boxes
                .windows(2)
                .map(|w| velocity(&w[0], &w[1], &seq.frame))
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut weights = ModelWeights {
        params: Params::random(&config, &mut rng),
        input_scale: input_scale(&jittered),
        codebook_checksum: codebook.checksum(),
        config,
    };
    let mut lengths: Vec<(usize, usize)> = clean.iter().map(|v| v.len()).enumerate().collect();
    lengths.sort_by_key(|&(i, len)| (len, i));
    let mut adam = Adam::new(&config);
    let mut losses = Vec::with_capacity(schedule.iterations);

    for iteration in 0..schedule.iterations {
        // equal-length windows: the anchor fixes the length, peers are long enough to crop
        let anchor = rng.gen_range(0..dataset.len());
        let len = clean[anchor].len().min(schedule.window);
        let first = lengths.partition_point(|&(_, l)| l < len);
        let eligible = &lengths[first..];
        let mut rows = Vec::with_capacity(schedule.batch_size);
        for _ in 0..schedule.batch_size {
            let (seq_idx, seq_len) = eligible[rng.gen_range(0..eligible.len())];
            let offset = rng.gen_range(0..=seq_len - len);
            let seq = &dataset[seq_idx];
            let boxes: Vec<BoundingBox> = seq.boxes[offset..=offset + len]
                .iter()
                .map(|b| jitter(b, schedule.jitter_fraction, &mut rng))
                .collect();
            rows.push(
                boxes
                    .windows(2)
                    .map(|w| velocity(&w[0], &w[1], &seq.frame))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let mut batch = Batch::from_velocities(&rows, codebook)?;
        let forcing = TeacherForcing {
            prob: schedule.teacher_forcing_prob,
            onset_step: ((schedule.teacher_forcing_onset_fraction * len as f64).ceil() as usize).max(1),
            codebook,
        };
        let tf = (forcing.prob > 0.0).then_some((&forcing, &mut rng));
        let caches = forward(&weights, &mut batch, tf);
        let (loss, mut grad) = backward(&weights, &batch, &caches, schedule.residual_weight);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration });
        }
        clip_global_norm(&mut grad, schedule.clip_norm);
        adam.update(&mut weights.params, &grad, schedule.learning_rate);
        losses.push(loss);
    }
    if !weights.params.is_finite() {
        return Err(Error::TrainingDiverged {
            iteration: schedule.iterations,
        });
    }
    Ok(TrainOutcome { weights, losses })
}
