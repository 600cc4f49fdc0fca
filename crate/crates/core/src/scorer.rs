//! Tracklet scoring and gap inpainting on top of the motion model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{ClusterIndexQuad, Codebook};
use crate::error::{Error, Result};
use crate::geometry::{apply_velocity, iou, velocity, BoundingBox, FrameGeometry, VelocityDelta};
use crate::model::{self, log_likelihood, DistributionQuad, ModelWeights, RecurrentState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFlag {
    Detected,
    Inpainted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Active,
    Gapped,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedBox {
    pub frame: u32,
    pub bbox: BoundingBox,
    pub source: SourceFlag,
}

/// An identity with its box history and the recurrent state synchronized
/// to its last box.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub boxes: Vec<TrackedBox>,
    pub state: RecurrentState,
    /// Predictive distribution of the velocity leading to the next frame.
    pub prediction: DistributionQuad,
    pub status: TrackStatus,
    /// Consecutive frames without an assigned detection.
    pub gap_length: u32,
    pub last_observed_frame: u32,
}

impl Tracklet {
    pub fn last(&self) -> &TrackedBox {
        self.boxes.last().expect("tracklets are never empty")
    }

    pub fn last_frame(&self) -> u32 {
        self.last().frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Independent multinomial draws per component.
    Multinomial,
    /// Arg-max of every component; a single deterministic branch.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintParams {
    /// Sampled branches per gap; 0 disables inpainting.
    pub num_samples: usize,
    /// Frames past the current one that every branch is extended into.
    pub lookahead: usize,
    pub iou_threshold: f64,
    pub sampling: SamplingMode,
    pub seed: u64,
}

impl Default for InpaintParams {
    fn default() -> Self {
        InpaintParams {
            num_samples: 30,
            lookahead: 3,
            iou_threshold: 0.5,
            sampling: SamplingMode::Multinomial,
            seed: 0,
        }
    }
}

impl InpaintParams {
    pub const HIGH_FRAME_RATE_FPS: f64 = 25.0;

    /// 3 frames of lookahead at 25 fps and above, 2 below.
    pub fn lookahead_for_frame_rate(fps: f64) -> usize {
        if fps >= Self::HIGH_FRAME_RATE_FPS {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("iou_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One sampled continuation of a gapped tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintCandidate {
    pub branch: usize,
    /// Missing frames, then the current frame, then the lookahead frames.
    pub boxes: Vec<BoundingBox>,
    /// Number of leading boxes that fill missing frames.
    pub gap: usize,
    /// State after consuming the gap boxes; predicts the current frame.
    pub state: RecurrentState,
    pub prediction: DistributionQuad,
    pub log_likelihood: f64,
    /// Sum over current and lookahead frames of the best IOU with detections.
    pub iou_score: f64,
}

impl InpaintCandidate {
    pub fn gap_boxes(&self) -> &[BoundingBox] {
        &self.boxes[..self.gap]
    }

    /// Box preceding the current frame: last inpainted box.
    pub fn anchor(&self) -> &BoundingBox {
        &self.boxes[self.gap - 1]
    }
}

/// What happened to every branch of an inpainting attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutcome {
    pub boxes: Vec<BoundingBox>,
    pub log_likelihood: f64,
    pub iou_score: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintReport {
    pub branches: Vec<BranchOutcome>,
    pub selected: Option<InpaintCandidate>,
}

/// Model, codebook and frame size bundled for tracklet-level operations.
#[derive(Debug, Clone, Copy)]
pub struct MotionScorer<'a> {
    pub model: &'a ModelWeights,
    pub codebook: &'a Codebook,
    pub frame: FrameGeometry,
}

impl<'a> MotionScorer<'a> {
    pub fn new(model: &'a ModelWeights, codebook: &'a Codebook, frame: FrameGeometry) -> Result<Self> {
        frame.validate()?;
        model.validate()?;
        if model.config.num_clusters != codebook.k() {
            return Err(Error::Config(format!(
                "model has {} clusters, codebook has {}",
                model.config.num_clusters,
                codebook.k()
            )));
        }
        Ok(MotionScorer {
            model,
            codebook,
            frame,
        })
    }

    /// New tracklet from a single detection; the zero velocity is fed as a
    /// seed token so the tracklet has a prediction for its second frame.
    pub fn start(&self, id: u64, frame: u32, bbox: BoundingBox, status: TrackStatus) -> Result<Tracklet> {
        bbox.validate()?;
        let init = model::init_state(self.model);
        let (state, prediction) = model::step(self.model, &init, &VelocityDelta::ZERO)?;
        Ok(Tracklet {
            id,
            boxes: vec![TrackedBox {
                frame,
                bbox,
                source: SourceFlag::Detected,
            }],
            state,
            prediction,
            status,
            gap_length: 0,
            last_observed_frame: frame,
        })
    }

    fn score_from(&self, anchor: &BoundingBox, dist: &DistributionQuad, detection: &BoundingBox) -> Result<f64> {
        detection.validate()?;
        let delta = velocity(anchor, detection, &self.frame)?;
        Ok(log_likelihood(dist, &self.codebook.quantize(&delta)))
    }

    /// Log-likelihood of `detection` continuing the tracklet from its last box.
    pub fn score_detection(&self, tracklet: &Tracklet, detection: &BoundingBox) -> Result<f64> {
        self.score_from(&tracklet.last().bbox, &tracklet.prediction, detection)
    }

    /// Log-likelihood of `detection` continuing an inpainted branch.
    pub fn score_candidate(&self, candidate: &InpaintCandidate, detection: &BoundingBox) -> Result<f64> {
        self.score_from(candidate.anchor(), &candidate.prediction, detection)
    }

    /// Appends the box for the frame after the tracklet's last one.
    pub fn advance(&self, tracklet: &mut Tracklet, frame: u32, bbox: BoundingBox, source: SourceFlag) -> Result<()> {
        let expected = tracklet.last_frame() + 1;
        if frame != expected {
            return Err(Error::Sequencing {
                expected,
                got: frame,
            });
        }
        self.push(tracklet, frame, bbox, source)
    }

    /// Re-attaches a detection across a gap without filling it: the whole
    /// displacement is consumed as one velocity token.
    pub fn reacquire(&self, tracklet: &mut Tracklet, frame: u32, bbox: BoundingBox) -> Result<()> {
        if frame <= tracklet.last_frame() {
            return Err(Error::Sequencing {
                expected: tracklet.last_frame() + 1,
                got: frame,
            });
        }
        self.push(tracklet, frame, bbox, SourceFlag::Detected)
    }

    fn push(&self, tracklet: &mut Tracklet, frame: u32, bbox: BoundingBox, source: SourceFlag) -> Result<()> {
        bbox.validate()?;
        let delta = velocity(&tracklet.last().bbox, &bbox, &self.frame)?;
        let (state, prediction) = model::step(self.model, &tracklet.state, &delta)?;
        tracklet.state = state;
        tracklet.prediction = prediction;
        tracklet.boxes.push(TrackedBox { frame, bbox, source });
        if source == SourceFlag::Detected {
            tracklet.last_observed_frame = frame;
            tracklet.gap_length = 0;
        }
        Ok(())
    }

    /// Adopts an inpainted branch: appends its gap boxes and switches the
    /// tracklet onto the branch state. The detection for the current frame
    /// is appended separately with [`MotionScorer::advance`].
    pub fn commit_candidate(&self, tracklet: &mut Tracklet, candidate: &InpaintCandidate) -> Result<()> {
        let start = tracklet.last_frame() + 1;
        for (i, b) in candidate.gap_boxes().iter().enumerate() {
            tracklet.boxes.push(TrackedBox {
                frame: start + i as u32,
                bbox: *b,
                source: SourceFlag::Inpainted,
            });
        }
        tracklet.state = candidate.state.clone();
        tracklet.prediction = candidate.prediction.clone();
        Ok(())
    }

    /// Samples `num_samples` continuations covering `gap` missing frames,
    /// the current frame and the lookahead, and picks the one whose boxes
    /// agree best with the detections.
    ///
    /// `detections[0]` are the current frame's detections, `detections[1..]`
    /// the following frames' (possibly fewer than `params.lookahead` at the
    /// end of a sequence). A branch whose current-frame box overlaps no
    /// detection by at least `params.iou_threshold` is rejected.
    pub fn inpaint(
        &self,
        tracklet: &Tracklet,
        gap: usize,
        detections: &[Vec<BoundingBox>],
        params: &InpaintParams,
        rng: &mut impl Rng,
    ) -> Result<InpaintReport> {
        if gap == 0 {
            return Err(Error::Input("inpainting needs a gap of at least one frame".into()));
        }
        let horizon = detections.len().min(params.lookahead + 1);
        let branches = match params.sampling {
            SamplingMode::Multinomial => params.num_samples,
            SamplingMode::Greedy => params.num_samples.min(1),
        };
        let mut report = InpaintReport {
            branches: Vec::with_capacity(branches),
            selected: None,
        };
        if horizon == 0 {
            return Ok(report);
        }
        let detections = &detections[..horizon];
        let total = gap + horizon;
        let mut live: Vec<Branch> = (0..branches)
            .map(|_| Branch {
                state: tracklet.state.clone(),
                pred: tracklet.prediction.clone(),
                last: tracklet.last().bbox,
                boxes: Vec::with_capacity(total),
                ll: 0.0,
                iou_score: 0.0,
                anchor: None,
                fate: Fate::Running,
            })
            .collect();

        // branches advance in lockstep so the recurrent steps can be batched
        for s in 0..total {
            let mut deltas = Vec::with_capacity(live.len());
            let mut stepping = Vec::with_capacity(live.len());
            for (b, br) in live.iter_mut().enumerate() {
                if br.fate != Fate::Running {
                    continue;
                }
                let q: ClusterIndexQuad = match params.sampling {
                    SamplingMode::Multinomial => model::sample(&br.pred, rng),
                    SamplingMode::Greedy => br.pred.argmax(),
                };
                br.ll += log_likelihood(&br.pred, &q);
                let delta = self.codebook.decode(&q)?;
                let next = match apply_velocity(&br.last, &delta, &self.frame) {
                    Ok(b) => b,
                    Err(Error::DegenerateBox { .. }) => {
                        br.fate = Fate::Degenerate;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                br.boxes.push(next);
                br.last = next;
                if s >= gap {
                    let best = detections[s - gap]
                        .iter()
                        .map(|d| iou(&next, d))
                        .fold(0.0, f64::max);
                    if s == gap && best < params.iou_threshold {
                        br.fate = Fate::Rejected;
                        continue;
                    }
                    br.iou_score += best;
                }
                if s + 1 < total {
                    deltas.push(delta);
                    stepping.push(b);
                }
            }
            if stepping.is_empty() {
                continue;
            }
            let states: Vec<&RecurrentState> = stepping.iter().map(|&b| &live[b].state).collect();
            let stepped = model::step_batch(self.model, &states, &deltas)?;
            for (&b, (state, pred)) in stepping.iter().zip(stepped) {
                let br = &mut live[b];
                br.state = state;
                br.pred = pred;
                if s + 1 == gap {
                    br.anchor = Some((br.state.clone(), br.pred.clone()));
                }
            }
        }

        let mut best: Option<InpaintCandidate> = None;
        for (branch, br) in live.into_iter().enumerate() {
            if br.fate == Fate::Degenerate {
                report.branches.push(BranchOutcome {
                    boxes: Vec::new(),
                    log_likelihood: f64::NEG_INFINITY,
                    iou_score: 0.0,
                    rejected: true,
                });
                continue;
            }
            let rejected = br.fate == Fate::Rejected;
            report.branches.push(BranchOutcome {
                boxes: br.boxes.clone(),
                log_likelihood: br.ll,
                iou_score: br.iou_score,
                rejected,
            });
            if rejected {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => br.iou_score > b.iou_score || (br.iou_score == b.iou_score && br.ll > b.log_likelihood),
            };
            if better {
                let (state, prediction) = br.anchor.expect("gap boxes are always followed by the current frame");
                best = Some(InpaintCandidate {
                    branch,
                    boxes: br.boxes,
                    gap,
                    state,
                    prediction,
                    log_likelihood: br.ll,
                    iou_score: br.iou_score,
                });
            }
        }
        report.selected = best;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Running,
    /// Missed every current-frame detection.
    Rejected,
    /// Sampled a box with non-positive size.
    Degenerate,
}

struct Branch {
    state: RecurrentState,
    pred: DistributionQuad,
    last: BoundingBox,
    boxes: Vec<BoundingBox>,
    ll: f64,
    iou_score: f64,
    /// State and prediction after the gap boxes were consumed.
    anchor: Option<(RecurrentState, DistributionQuad)>,
    fate: Fate,
}
