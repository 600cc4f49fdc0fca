//! Online tracking loop with two-pass assignment.
//!
//! Each frame, tracklets that were observed on the previous frame are
//! matched first. Tracklets with a detection gap are then inpainted and
//! matched against whatever detections are left. Unmatched detections start
//! tentative tracklets; tracklets unobserved for too long are terminated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve, CostMatrix};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameGeometry};
use crate::model::ModelWeights;
use crate::mot_io::Detection;
use crate::scorer::{InpaintCandidate, InpaintParams, MotionScorer, Tracklet, TrackStatus};

pub use crate::scorer::SourceFlag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Frames without an assigned detection before a tracklet is dropped.
    pub termination_gap: u32,
    /// Highest assignable cost (negative log-likelihood). `None` uses
    /// `gate_fraction` times the cost of a uniform prediction.
    pub assignment_gate: Option<f64>,
    pub gate_fraction: f64,
    /// Consecutive assigned frames a new tracklet needs to be reported.
    pub birth_confirmation: u32,
    pub min_detection_confidence: f64,
    pub inpaint: InpaintParams,
    /// Report inpainted boxes alongside detected ones.
    pub emit_inpainted: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            termination_gap: 60,
            assignment_gate: None,
            gate_fraction: 0.9,
            birth_confirmation: 2,
            min_detection_confidence: 0.0,
            inpaint: InpaintParams::default(),
            emit_inpainted: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.termination_gap == 0 || self.birth_confirmation == 0 {
            return Err(Error::Config(
                "termination_gap and birth_confirmation must be positive".into(),
            ));
        }
        if let Some(g) = self.assignment_gate {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config("assignment_gate must be positive".into()));
            }
        }
        if !(self.gate_fraction > 0.0 && self.gate_fraction.is_finite()) {
            return Err(Error::Config("gate_fraction must be positive".into()));
        }
        if !(self.min_detection_confidence >= 0.0) {
            return Err(Error::Config("min_detection_confidence must be >= 0".into()));
        }
        self.inpaint.validate()
    }

    /// Cost ceiling for a model with `k` clusters per component.
    pub fn gate_for(&self, k: usize) -> f64 {
        self.assignment_gate
            .unwrap_or(self.gate_fraction * 4.0 * (k as f64).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommittedBox {
    pub frame: u32,
    pub id: u64,
    pub bbox: BoundingBox,
    pub source: SourceFlag,
}

/// Output of one processed frame. Boxes may belong to earlier frames when a
/// gap is filled or a tentative tracklet is confirmed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameResult {
    pub frame: u32,
    pub committed: Vec<CommittedBox>,
    pub born: Vec<u64>,
    pub terminated: Vec<u64>,
}

/// Per-frame bookkeeping exposed for inspection and tests.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameTrace {
    /// (detection index, tracklet id, cost) for every committed match.
    pub first_pass: Vec<(usize, u64, f64)>,
    pub second_pass: Vec<(usize, u64, f64)>,
}

pub struct Tracker<'a> {
    scorer: MotionScorer<'a>,
    config: TrackerConfig,
    gate: f64,
    tracklets: Vec<Tracklet>,
    next_id: u64,
    rng: ChaCha8Rng,
    last_frame: Option<u32>,
    trace: FrameTrace,
}

impl<'a> Tracker<'a> {
    pub fn new(
        model: &'a ModelWeights,
        codebook: &'a Codebook,
        frame: FrameGeometry,
        config: TrackerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let scorer = MotionScorer::new(model, codebook, frame)?;
        Ok(Tracker {
            gate: config.gate_for(codebook.k()),
            rng: ChaCha8Rng::seed_from_u64(config.inpaint.seed),
            scorer,
            config,
            tracklets: Vec::new(),
            next_id: 1,
            last_frame: None,
            trace: FrameTrace::default(),
        })
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn last_trace(&self) -> &FrameTrace {
        &self.trace
    }

    /// Processes frame `frame` given its detections and those of the next
    /// few frames (`lookahead`, possibly shorter near the sequence end).
    pub fn process_frame(
        &mut self,
        frame: u32,
        detections: &[Detection],
        lookahead: &[Vec<Detection>],
    ) -> Result<FrameResult> {
        if let Some(last) = self.last_frame {
            if frame != last + 1 {
                return Err(Error::Sequencing {
                    expected: last + 1,
                    got: frame,
                });
            }
        }
        let first_frame = self.last_frame.is_none();
        self.last_frame = Some(frame);
        self.trace = FrameTrace::default();
        let min_conf = self.config.min_detection_confidence;
        let dets: Vec<BoundingBox> = detections
            .iter()
            .filter(|d| d.confidence >= min_conf)
            .map(|d| d.bbox)
            .collect();
        let mut result = FrameResult {
            frame,
            ..Default::default()
        };

        if first_frame {
            for b in dets {
                let id = self.fresh_id();
                let t = self.scorer.start(id, frame, b, TrackStatus::Active)?;
                result.born.push(id);
                result.committed.push(CommittedBox {
                    frame,
                    id,
                    bbox: b,
                    source: SourceFlag::Detected,
                });
                self.tracklets.push(t);
            }
            return Ok(result);
        }

        let mut det_used = vec![false; dets.len()];
        let mut matched = vec![false; self.tracklets.len()];

        // pass 1: tracklets observed on the previous frame
        let fresh: Vec<usize> = (0..self.tracklets.len())
            .filter(|&j| self.tracklets[j].gap_length == 0)
            .collect();
        let mut costs = CostMatrix::new(dets.len(), fresh.len());
        for (i, d) in dets.iter().enumerate() {
            for (c, &j) in fresh.iter().enumerate() {
                let cost = -self.scorer.score_detection(&self.tracklets[j], d)?;
                if cost > self.gate {
                    costs.forbid(i, c);
                } else {
                    costs.set(i, c, cost)?;
                }
            }
        }
        for (i, c) in solve(&costs) {
            let j = fresh[c];
            det_used[i] = true;
            matched[j] = true;
            let id = self.tracklets[j].id;
            self.trace.first_pass.push((i, id, costs.get(i, c)));
            self.scorer
                .advance(&mut self.tracklets[j], frame, dets[i], SourceFlag::Detected)?;
        }

        // pass 2: gapped tracklets against the remaining detections
        let gapped: Vec<usize> = (0..self.tracklets.len())
            .filter(|&j| self.tracklets[j].gap_length > 0)
            .collect();
        let remaining: Vec<usize> = (0..dets.len()).filter(|&i| !det_used[i]).collect();
        if !gapped.is_empty() && !remaining.is_empty() {
            let inpaint = self.config.inpaint.num_samples > 0;
            let mut window: Vec<Vec<BoundingBox>> = vec![remaining.iter().map(|&i| dets[i]).collect()];
            window.extend(
                lookahead
                    .iter()
                    .take(self.config.inpaint.lookahead)
                    .map(|f| f.iter().filter(|d| d.confidence >= min_conf).map(|d| d.bbox).collect()),
            );
            let mut candidates: Vec<Option<InpaintCandidate>> = Vec::with_capacity(gapped.len());
            let mut costs = CostMatrix::new(remaining.len(), gapped.len());
            for (c, &j) in gapped.iter().enumerate() {
                let t = &self.tracklets[j];
                let candidate = if inpaint {
                    let report = self.scorer.inpaint(
                        t,
                        t.gap_length as usize,
                        &window,
                        &self.config.inpaint,
                        &mut self.rng,
                    )?;
                    report.selected
                } else {
                    None
                };
                for (r, &i) in remaining.iter().enumerate() {
                    let score = match (&candidate, inpaint) {
                        (Some(cand), _) => Some(self.scorer.score_candidate(cand, &dets[i])?),
                        (None, false) => Some(self.scorer.score_detection(t, &dets[i])?),
                        (None, true) => None,
                    };
                    match score.map(|s| -s) {
                        Some(cost) if cost <= self.gate => costs.set(r, c, cost)?,
                        _ => costs.forbid(r, c),
                    }
                }
                candidates.push(candidate);
            }
            for (r, c) in solve(&costs) {
                let i = remaining[r];
                let j = gapped[c];
                det_used[i] = true;
                matched[j] = true;
                let id = self.tracklets[j].id;
                self.trace.second_pass.push((i, id, costs.get(r, c)));
                let before = self.tracklets[j].boxes.len();
                match &candidates[c] {
                    Some(cand) => {
                        self.scorer.commit_candidate(&mut self.tracklets[j], cand)?;
                        self.scorer
                            .advance(&mut self.tracklets[j], frame, dets[i], SourceFlag::Detected)?;
                    }
                    None => self.scorer.reacquire(&mut self.tracklets[j], frame, dets[i])?,
                }
                let t = &self.tracklets[j];
                if t.status != TrackStatus::Tentative && self.config.emit_inpainted {
                    for b in &t.boxes[before..t.boxes.len() - 1] {
                        result.committed.push(CommittedBox {
                            frame: b.frame,
                            id,
                            bbox: b.bbox,
                            source: b.source,
                        });
                    }
                }
            }
        }

        // lifecycle
        let confirm = self.config.birth_confirmation as usize;
        let mut survivors = Vec::with_capacity(self.tracklets.len());
        for (j, mut t) in std::mem::take(&mut self.tracklets).into_iter().enumerate() {
            if matched[j] {
                t.gap_length = 0;
                match t.status {
                    TrackStatus::Tentative if t.boxes.len() >= confirm => {
                        t.status = TrackStatus::Active;
                        result.born.push(t.id);
                        result.committed.extend(t.boxes.iter().map(|b| CommittedBox {
                            frame: b.frame,
                            id: t.id,
                            bbox: b.bbox,
                            source: b.source,
                        }));
                    }
                    TrackStatus::Tentative => {}
                    _ => {
                        t.status = TrackStatus::Active;
                        let last = t.last();
                        result.committed.push(CommittedBox {
                            frame,
                            id: t.id,
                            bbox: last.bbox,
                            source: last.source,
                        });
                    }
                }
                survivors.push(t);
            } else if t.status == TrackStatus::Tentative {
                // unconfirmed tracklets vanish on their first miss
            } else {
                t.gap_length += 1;
                if t.gap_length > self.config.termination_gap {
                    t.status = TrackStatus::Terminated;
                    result.terminated.push(t.id);
                } else {
                    t.status = TrackStatus::Gapped;
                    survivors.push(t);
                }
            }
        }
        self.tracklets = survivors;

        for (i, b) in dets.iter().enumerate() {
            if det_used[i] {
                continue;
            }
            let id = self.fresh_id();
            let status = if confirm <= 1 {
                TrackStatus::Active
            } else {
                TrackStatus::Tentative
            };
            let t = self.scorer.start(id, frame, *b, status)?;
            if status == TrackStatus::Active {
                result.born.push(id);
                result.committed.push(CommittedBox {
                    frame,
                    id,
                    bbox: *b,
                    source: SourceFlag::Detected,
                });
            }
            self.tracklets.push(t);
        }
        result.committed.sort_by_key(|c| (c.frame, c.id));
        Ok(result)
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// Runs a whole sequence. `frames[k]` holds the detections of frame `k + 1`.
pub fn run_sequence(
    frames: &[Vec<Detection>],
    geometry: FrameGeometry,
    model: &ModelWeights,
    codebook: &Codebook,
    config: &TrackerConfig,
) -> Result<Vec<FrameResult>> {
    let mut tracker = Tracker::new(model, codebook, geometry, *config)?;
    let horizon = config.inpaint.lookahead;
    let mut out = Vec::with_capacity(frames.len());
    for (k, dets) in frames.iter().enumerate() {
        let end = (k + 1 + horizon).min(frames.len());
        out.push(tracker.process_frame(k as u32 + 1, dets, &frames[k + 1..end])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn book() -> Codebook {
        let c = vec![-0.01, 0.0, 0.01];
        Codebook::from_centroids([c.clone(), c.clone(), c.clone(), c]).unwrap()
    }

    /// Always predicts dx = +0.01 (10 px at 1000 px width), nothing else.
    fn one_hot_model() -> ModelWeights {
        let mut w = ModelWeights::zeros(ModelConfig::new(2, 3));
        for (comp, &h) in [2usize, 1, 1, 1].iter().enumerate() {
            for j in 0..3 {
                w.params.head_b[[0, comp * 3 + j]] = if j == h { 30.0 } else { -30.0 };
            }
        }
        w.codebook_checksum = book().checksum();
        w
    }

    fn frame() -> FrameGeometry {
        FrameGeometry::new(1000.0, 1000.0).unwrap()
    }

    fn det(frame: u32, x: f64, y: f64) -> Detection {
        Detection {
            frame,
            bbox: BoundingBox::new(x, y, 50.0, 100.0).unwrap(),
            confidence: 1.0,
        }
    }

    fn walker(frames: u32, missing: &[u32]) -> Vec<Vec<Detection>> {
        (1..=frames)
            .map(|f| {
                if missing.contains(&f) {
                    vec![]
                } else {
                    vec![det(f, 100.0 + 10.0 * f as f64, 300.0)]
                }
            })
            .collect()
    }

    fn rows(results: &[FrameResult]) -> Vec<CommittedBox> {
        let mut v: Vec<CommittedBox> = results.iter().flat_map(|r| r.committed.clone()).collect();
        v.sort_by_key(|c| (c.frame, c.id));
        v
    }

    #[test]
    fn single_object_single_track() {
        let (w, b) = (one_hot_model(), book());
        let res = run_sequence(&walker(20, &[]), frame(), &w, &b, &TrackerConfig::default()).unwrap();
        let out = rows(&res);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|c| c.id == out[0].id));
        assert_eq!(res[0].born.len(), 1);
        assert!(res[1..].iter().all(|r| r.born.is_empty() && r.terminated.is_empty()));
    }

    #[test]
    fn gap_is_inpainted() {
        let (w, b) = (one_hot_model(), book());
        let res = run_sequence(&walker(20, &[8, 9, 10]), frame(), &w, &b, &TrackerConfig::default()).unwrap();
        let out = rows(&res);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|c| c.id == out[0].id));
        for c in &out {
            let want = if (8..=10).contains(&c.frame) {
                SourceFlag::Inpainted
            } else {
                SourceFlag::Detected
            };
            assert_eq!(c.source, want, "frame {}", c.frame);
            assert!((c.bbox.x - (100.0 + 10.0 * c.frame as f64)).abs() < 1e-9);
        }

        let no_inpaint = TrackerConfig {
            inpaint: InpaintParams {
                num_samples: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let res = run_sequence(&walker(20, &[8, 9, 10]), frame(), &w, &b, &no_inpaint).unwrap();
        let frames: Vec<u32> = rows(&res).iter().map(|c| c.frame).collect();
        assert_eq!(frames.len(), 17);
        assert!(!frames.iter().any(|f| (8..=10).contains(f)));

        let hidden = TrackerConfig {
            emit_inpainted: false,
            ..Default::default()
        };
        let res = run_sequence(&walker(20, &[8, 9, 10]), frame(), &w, &b, &hidden).unwrap();
        assert_eq!(rows(&res).len(), 17);
    }

    #[test]
    fn termination_after_long_gap() {
        let (w, b) = (one_hot_model(), book());
        let cfg = TrackerConfig {
            termination_gap: 3,
            ..Default::default()
        };
        let dets = walker(10, &[3, 4, 5, 6, 7, 8, 9, 10]);
        let res = run_sequence(&dets, frame(), &w, &b, &cfg).unwrap();
        let terminated: Vec<(u32, u64)> = res
            .iter()
            .flat_map(|r| r.terminated.iter().map(move |&id| (r.frame, id)))
            .collect();
        // last seen frame 2, gap exceeds 3 on frame 6
        assert_eq!(terminated, vec![(6, 1)]);
    }

    #[test]
    fn tentative_needs_confirmation() {
        let (w, b) = (one_hot_model(), book());
        let mut dets = walker(6, &[]);
        // a one-frame false positive far from the walker
        dets[2].push(det(3, 700.0, 700.0));
        let res = run_sequence(&dets, frame(), &w, &b, &TrackerConfig::default()).unwrap();
        let ids: std::collections::BTreeSet<u64> = rows(&res).iter().map(|c| c.id).collect();
        assert_eq!(ids.len(), 1);
    }

    #[test]
    fn empty_stream_and_sequencing() {
        let (w, b) = (one_hot_model(), book());
        assert!(run_sequence(&[], frame(), &w, &b, &TrackerConfig::default())
            .unwrap()
            .is_empty());
        let empty = vec![vec![]; 5];
        let res = run_sequence(&empty, frame(), &w, &b, &TrackerConfig::default()).unwrap();
        assert!(rows(&res).is_empty());

        let mut t = Tracker::new(&w, &b, frame(), TrackerConfig::default()).unwrap();
        t.process_frame(1, &[], &[]).unwrap();
        assert!(matches!(
            t.process_frame(3, &[], &[]),
            Err(Error::Sequencing { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn committed_costs_respect_gate() {
        let (w, b) = (one_hot_model(), book());
        let mut t = Tracker::new(&w, &b, frame(), TrackerConfig::default()).unwrap();
        let dets = walker(12, &[5]);
        for (k, d) in dets.iter().enumerate() {
            t.process_frame(k as u32 + 1, d, &dets[k + 1..(k + 4).min(dets.len())])
                .unwrap();
            let tr = t.last_trace();
            for &(_, _, c) in tr.first_pass.iter().chain(&tr.second_pass) {
                assert!(c <= t.gate());
            }
            let p1: Vec<u64> = tr.first_pass.iter().map(|m| m.1).collect();
            assert!(tr.second_pass.iter().all(|m| !p1.contains(&m.1)));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrackerConfig::default().validate().is_ok());
        let bad = TrackerConfig {
            termination_gap: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let k = 1024;
        let gate = TrackerConfig::default().gate_for(k);
        assert!((gate - 0.9 * 4.0 * (1024f64).ln()).abs() < 1e-12);
    }
}
