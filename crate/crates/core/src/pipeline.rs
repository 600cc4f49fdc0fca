//! Glue between files on disk and the algorithms: loading sequences,
//! building training data, fitting, training and tracking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{velocity, FrameGeometry, VelocityDelta};
use crate::metrics::{self, MetricsReport};
use crate::model::{jitter, train, ModelConfig, ModelWeights, TrainOutcome, TrainSequence};
use crate::mot_io::{self, Detection, GtFilter, LabeledBox, SequenceMeta};
use crate::tracker::{self, FrameResult};

/// One sequence directory: metadata, detections and (if present) ground truth.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub dir: PathBuf,
    pub meta: SequenceMeta,
    pub detections: Vec<Detection>,
    pub ground_truth: Option<Vec<LabeledBox>>,
}

impl SequenceData {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = mot_io::read_seqinfo(&mot_io::seqinfo_path(dir))?;
        let det = mot_io::det_path(dir);
        let detections = if det.exists() {
            mot_io::read_detections(&det)?
        } else {
            Vec::new()
        };
        let gt = mot_io::gt_path(dir);
        let ground_truth = if gt.exists() {
            Some(mot_io::read_ground_truth(&gt, GtFilter::default())?)
        } else {
            None
        };
        Ok(SequenceData {
            dir: dir.to_path_buf(),
            meta,
            detections,
            ground_truth,
        })
    }

    /// Detections bucketed per frame over the whole sequence length.
    pub fn frames(&self) -> Vec<Vec<Detection>> {
        mot_io::group_by_frame(&self.detections, self.meta.length)
    }
}

/// `root` itself if it holds a `seqinfo.ini`, otherwise its immediate
/// subdirectories that do, sorted by name.
pub fn find_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if mot_io::seqinfo_path(root).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && mot_io::seqinfo_path(&path).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no sequences found under {}", root.display())));
    }
    Ok(dirs)
}

/// Splits ground truth into per-identity runs of consecutive frames, keeping
/// runs with at least `min_len` boxes.
pub fn trajectories(gt: &[LabeledBox], frame: FrameGeometry, min_len: usize) -> Vec<TrainSequence> {
    let mut by_id: BTreeMap<i64, Vec<&LabeledBox>> = BTreeMap::new();
    for b in gt {
        by_id.entry(b.id).or_default().push(b);
    }
    let mut out = Vec::new();
    for boxes in by_id.values_mut() {
        boxes.sort_by_key(|b| b.frame);
        let mut run: Vec<&LabeledBox> = Vec::new();
        for b in boxes.iter() {
            if run.last().is_some_and(|p| b.frame != p.frame + 1) {
                push_run(&mut out, &run, frame, min_len);
                run.clear();
            }
            run.push(b);
        }
        push_run(&mut out, &run, frame, min_len);
    }
    out
}

fn push_run(out: &mut Vec<TrainSequence>, run: &[&LabeledBox], frame: FrameGeometry, min_len: usize) {
    if run.len() >= min_len.max(1) {
        out.push(TrainSequence {
            boxes: run.iter().map(|b| b.bbox).collect(),
            frame,
        });
    }
}

pub fn sequence_velocities(seqs: &[TrainSequence]) -> Result<Vec<VelocityDelta>> {
    let mut out = Vec::new();
    for s in seqs {
        for w in s.boxes.windows(2) {
            out.push(velocity(&w[0], &w[1], &s.frame)?);
        }
    }
    Ok(out)
}

/// Training trajectories from every sequence under `root` that has ground truth.
pub fn load_training_set(root: &Path) -> Result<Vec<TrainSequence>> {
    let mut all = Vec::new();
    for dir in find_sequences(root)? {
        let seq = SequenceData::load(&dir)?;
        if let Some(gt) = &seq.ground_truth {
            all.extend(trajectories(gt, seq.meta.geometry, 3));
        }
    }
    if all.is_empty() {
        return Err(Error::EmptyInput("ground-truth trajectories"));
    }
    Ok(all)
}

/// Jittered copies of the training set seen by the codebook fit.
const CODEBOOK_JITTER_PASSES: usize = 4;

/// Velocities of `passes` jittered copies of every sequence, the same
/// augmentation the model is trained with.
pub fn jittered_velocities(
    seqs: &[TrainSequence],
    jitter_fraction: f64,
    passes: usize,
    seed: u64,
) -> Result<Vec<VelocityDelta>> {
    if jitter_fraction == 0.0 {
        return sequence_velocities(seqs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..passes {
        for s in seqs {
            let boxes: Vec<_> = s.boxes.iter().map(|b| jitter(b, jitter_fraction, &mut rng)).collect();
            for w in boxes.windows(2) {
                out.push(velocity(&w[0], &w[1], &s.frame)?);
            }
        }
    }
    Ok(out)
}

/// Fits the codebook on the augmented training velocities so its clusters
/// cover the noise level the model learns and scores under.
pub fn fit_codebook(seqs: &[TrainSequence], cfg: &RunConfig) -> Result<Codebook> {
    let v = jittered_velocities(
        seqs,
        cfg.train.jitter_fraction,
        CODEBOOK_JITTER_PASSES,
        cfg.codebook_seed(),
    )?;
    Codebook::fit(&v, cfg.codebook.k, cfg.codebook_seed(), cfg.codebook.max_iters)
}

pub fn train_model(seqs: &[TrainSequence], codebook: &Codebook, cfg: &RunConfig) -> Result<TrainOutcome> {
    let model = ModelConfig::new(cfg.model.hidden_dim, codebook.k());
    train(seqs, codebook, model, &cfg.schedule())
}

pub struct TrackOutput {
    pub results: Vec<FrameResult>,
    /// Result file contents.
    pub text: String,
    pub metrics: Option<MetricsReport>,
}

/// Tracks one sequence; metrics are computed from the written result text so
/// they match what `evaluate` would report for the file.
pub fn track_sequence(
    seq: &SequenceData,
    model: &ModelWeights,
    codebook: &Codebook,
    cfg: &RunConfig,
) -> Result<TrackOutput> {
    let tcfg = cfg.tracker_for(seq.meta.frame_rate);
    let results = tracker::run_sequence(&seq.frames(), seq.meta.geometry, model, codebook, &tcfg)?;
    let text = mot_io::format_results(&results);
    let metrics = match &seq.ground_truth {
        Some(gt) => {
            let pred = mot_io::parse_labeled(&text, &seq.dir, None)?;
            Some(metrics::evaluate(gt, &pred, cfg.eval_iou_threshold)?)
        }
        None => None,
    };
    Ok(TrackOutput {
        results,
        text,
        metrics,
    })
}
