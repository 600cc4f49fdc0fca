//! Synthetic scenes: ground-truth trajectories plus a noisy detector.
//!
//! Trajectories and detector noise come from separate random streams of the
//! same seed, so changing the noise settings leaves the trajectories alone.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameGeometry};
use crate::mot_io::{self, Detection, LabeledBox, SequenceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    ConstantVelocity,
    /// Constant drift plus a lateral oscillation.
    Sinusoidal,
    /// Velocity perturbed by Gaussian acceleration every frame.
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub name: String,
    pub num_objects: usize,
    pub num_frames: u32,
    pub width: f64,
    pub height: f64,
    pub frame_rate: f64,
    /// Object `i` moves with `families[i % families.len()]`.
    pub families: Vec<MotionFamily>,
    /// Upper bound on drift speed, pixels per frame.
    pub max_speed: f64,
    pub dropout_prob: f64,
    /// Standard deviation of the per-coordinate detector noise, pixels.
    pub jitter_std: f64,
    /// Expected number of spurious detections per frame.
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            name: "synth-01".into(),
            num_objects: 10,
            num_frames: 300,
            width: 1920.0,
            height: 1080.0,
            frame_rate: 30.0,
            families: vec![
                MotionFamily::ConstantVelocity,
                MotionFamily::Sinusoidal,
                MotionFamily::RandomWalk,
            ],
            max_speed: 8.0,
            dropout_prob: 0.1,
            jitter_std: 0.5,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_objects == 0 || self.num_frames == 0 {
            return bad("num_objects and num_frames must be positive".into());
        }
        self.geometry()?;
        if !(self.frame_rate > 0.0) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if self.families.is_empty() {
            return bad("families must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} outside [0, 1]", self.dropout_prob));
        }
        for (name, v) in [
            ("max_speed", self.max_speed),
            ("jitter_std", self.jitter_std),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<FrameGeometry> {
        FrameGeometry::new(self.width, self.height).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SequenceMeta,
    pub ground_truth: Vec<LabeledBox>,
    pub detections: Vec<Detection>,
}

impl Scene {
    /// Writes `seqinfo.ini`, `gt/gt.txt` and `det/det.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        mot_io::write_seqinfo(&mot_io::seqinfo_path(dir), &self.meta)?;
        mot_io::write_ground_truth(&mot_io::gt_path(dir), &self.ground_truth)?;
        mot_io::write_detections(&mot_io::det_path(dir), &self.detections)
    }

    /// Ground-truth boxes of one identity in frame order.
    pub fn trajectory(&self, id: i64) -> Vec<LabeledBox> {
        self.ground_truth.iter().filter(|b| b.id == id).copied().collect()
    }
}

struct Mover {
    family: MotionFamily,
    center: [f64; 2],
    drift: [f64; 2],
    base_size: [f64; 2],
    // sinusoidal only
    amplitude: f64,
    period: f64,
    phase: f64,
}

impl Mover {
    fn spawn(family: MotionFamily, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let w = rng.gen_range(30.0..70.0);
        let base_size = [w, w * rng.gen_range(2.0..2.8)];
        let angle = rng.gen_range(0.0..TAU);
        let speed = spec.max_speed * rng.gen_range(0.3..1.0);
        let mut m = Mover {
            family,
            center: [0.0; 2],
            drift: [speed * angle.cos(), speed * angle.sin()],
            base_size,
            amplitude: rng.gen_range(10.0..40.0),
            period: rng.gen_range(30.0..90.0),
            phase: rng.gen_range(0.0..TAU),
        };
        let (ylo, yhi) = m.y_range(spec.height);
        m.center[1] = if yhi > ylo { rng.gen_range(ylo..yhi) } else { spec.height / 2.0 };
        let (xlo, xhi) = m.x_range(spec);
        m.center[0] = if xhi > xlo { rng.gen_range(xlo..xhi) } else { spec.width / 2.0 };
        m
    }

    /// Centers for which the whole box, sized for that center, is inside
    /// the frame vertically.
    fn y_range(&self, height: f64) -> (f64, f64) {
        let bh = self.base_size[1];
        let lo = 0.3 * bh / (1.0 - 0.4 * bh / height);
        let hi = (height - 0.3 * bh) / (1.0 + 0.4 * bh / height);
        (lo, hi)
    }

    fn x_range(&self, spec: &SceneSpec) -> (f64, f64) {
        let half = self.size(self.center[1], spec.height)[0] / 2.0;
        (half, spec.width - half)
    }

    /// Boxes grow toward the bottom of the frame, a crude perspective cue.
    fn size(&self, cy: f64, height: f64) -> [f64; 2] {
        let s = 0.6 + 0.8 * (cy / height).clamp(0.0, 1.0);
        [self.base_size[0] * s, self.base_size[1] * s]
    }

    fn velocity(&self, t: f64) -> [f64; 2] {
        match self.family {
            MotionFamily::Sinusoidal => {
                let norm = self.drift[0].hypot(self.drift[1]).max(1e-9);
                let perp = [-self.drift[1] / norm, self.drift[0] / norm];
                let lateral = self.amplitude * TAU / self.period * (TAU * t / self.period + self.phase).cos();
                [self.drift[0] + lateral * perp[0], self.drift[1] + lateral * perp[1]]
            }
            _ => self.drift,
        }
    }

    fn advance(&mut self, t: f64, spec: &SceneSpec, rng: &mut ChaCha8Rng, accel: &Normal<f64>) {
        if self.family == MotionFamily::RandomWalk {
            self.drift[0] += accel.sample(rng);
            self.drift[1] += accel.sample(rng);
            let speed = self.drift[0].hypot(self.drift[1]);
            if speed > spec.max_speed {
                let k = spec.max_speed / speed;
                self.drift = [self.drift[0] * k, self.drift[1] * k];
            }
        }
        let v = self.velocity(t);
        self.center = [self.center[0] + v[0], self.center[1] + v[1]];
        // vertical first: the horizontal extent depends on the row
        for a in [1, 0] {
            let (lo, hi) = if a == 1 { self.y_range(spec.height) } else { self.x_range(spec) };
            if hi <= lo {
                self.center[a] = if a == 1 { spec.height } else { spec.width } / 2.0;
                continue;
            }
            // bounce off the frame border
            if self.center[a] < lo {
                self.center[a] = 2.0 * lo - self.center[a];
                self.drift[a] = self.drift[a].abs();
            } else if self.center[a] > hi {
                self.center[a] = 2.0 * hi - self.center[a];
                self.drift[a] = -self.drift[a].abs();
            }
            self.center[a] = self.center[a].clamp(lo, hi);
        }
    }

    fn bbox(&self, height: f64) -> BoundingBox {
        let [w, h] = self.size(self.center[1], height);
        BoundingBox {
            x: self.center[0] - w / 2.0,
            y: self.center[1] - h / 2.0,
            w,
            h,
        }
    }
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let mut motion_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    motion_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(2);
    let accel = Normal::new(0.0, 0.15 * spec.max_speed).expect("finite std");
    let jitter = Normal::new(0.0, spec.jitter_std).expect("finite std");

    let mut movers: Vec<Mover> = (0..spec.num_objects)
        .map(|i| Mover::spawn(spec.families[i % spec.families.len()], spec, &mut motion_rng))
        .collect();
    let mut ground_truth = Vec::with_capacity(spec.num_objects * spec.num_frames as usize);
    for frame in 1..=spec.num_frames {
        for (i, m) in movers.iter_mut().enumerate() {
            if frame > 1 {
                m.advance(frame as f64, spec, &mut motion_rng, &accel);
            }
            ground_truth.push(LabeledBox {
                frame,
                id: i as i64 + 1,
                bbox: m.bbox(spec.height),
            });
        }
    }

    let mut detections = Vec::with_capacity(ground_truth.len());
    let mut gt_iter = ground_truth.iter().peekable();
    for frame in 1..=spec.num_frames {
        while let Some(g) = gt_iter.next_if(|g| g.frame == frame) {
            if noise_rng.gen_bool(spec.dropout_prob) {
                continue;
            }
            let mut b = g.bbox;
            if spec.jitter_std > 0.0 {
                b.x += jitter.sample(&mut noise_rng);
                b.y += jitter.sample(&mut noise_rng);
                b.w = (b.w + jitter.sample(&mut noise_rng)).max(1.0);
                b.h = (b.h + jitter.sample(&mut noise_rng)).max(1.0);
            }
            detections.push(Detection {
                frame,
                bbox: b,
                confidence: 1.0,
            });
        }
        let whole = spec.false_positive_rate.floor();
        let spurious = whole as usize + usize::from(noise_rng.gen_bool(spec.false_positive_rate - whole));
        for _ in 0..spurious {
            let w = noise_rng.gen_range(30.0..90.0);
            let h = w * noise_rng.gen_range(2.0..2.8);
            detections.push(Detection {
                frame,
                bbox: BoundingBox {
                    x: noise_rng.gen_range(0.0..(spec.width - w).max(1.0)),
                    y: noise_rng.gen_range(0.0..(spec.height - h).max(1.0)),
                    w,
                    h,
                },
                confidence: noise_rng.gen_range(0.3..1.0),
            });
        }
    }

    Ok(Scene {
        meta: SequenceMeta {
            name: spec.name.clone(),
            frame_rate: spec.frame_rate,
            geometry,
            length: spec.num_frames,
        },
        ground_truth,
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(spec: SceneSpec) -> SceneSpec {
        SceneSpec {
            dropout_prob: 0.0,
            jitter_std: 0.0,
            false_positive_rate: 0.0,
            ..spec
        }
    }

    #[test]
    fn noiseless_detections_equal_ground_truth() {
        let s = generate(&quiet(SceneSpec::default())).unwrap();
        assert_eq!(s.detections.len(), s.ground_truth.len());
        for (d, g) in s.detections.iter().zip(&s.ground_truth) {
            assert_eq!((d.frame, d.bbox), (g.frame, g.bbox));
        }
    }

    #[test]
    fn full_dropout_is_empty() {
        let spec = SceneSpec {
            dropout_prob: 1.0,
            ..SceneSpec::default()
        };
        assert!(generate(&spec).unwrap().detections.is_empty());
    }

    #[test]
    fn dropout_rate_within_binomial_bound() {
        for seed in 0..5 {
            let spec = SceneSpec {
                num_objects: 10,
                num_frames: 100,
                dropout_prob: 0.1,
                jitter_std: 0.0,
                seed,
                ..SceneSpec::default()
            };
            let s = generate(&spec).unwrap();
            assert_eq!(s.ground_truth.len(), 1000);
            let dropped = 1000 - s.detections.len();
            assert!((70..=130).contains(&dropped), "seed {seed}: {dropped}");
        }
    }

    #[test]
    fn boxes_stay_inside_frame() {
        for seed in 0..4 {
            let spec = SceneSpec {
                num_frames: 600,
                max_speed: 25.0,
                seed,
                ..SceneSpec::default()
            };
            for g in generate(&spec).unwrap().ground_truth {
                let b = g.bbox;
                b.validate().unwrap();
                assert!(b.x >= -1e-9 && b.y >= -1e-9, "{b:?}");
                assert!(b.right() <= spec.width + 1e-9 && b.bottom() <= spec.height + 1e-9, "{b:?}");
            }
        }
    }

    #[test]
    fn deterministic_and_noise_independent() {
        let spec = SceneSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let noisy = SceneSpec {
            jitter_std: 5.0,
            false_positive_rate: 2.5,
            ..spec.clone()
        };
        assert_eq!(
            generate(&spec).unwrap().ground_truth,
            generate(&noisy).unwrap().ground_truth
        );
        let other = SceneSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().ground_truth, generate(&other).unwrap().ground_truth);
    }

    #[test]
    fn false_positive_rate_adds_boxes() {
        let spec = SceneSpec {
            false_positive_rate: 2.0,
            dropout_prob: 0.0,
            ..SceneSpec::default()
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.detections.len(), s.ground_truth.len() + 2 * 300);
    }

    #[test]
    fn written_scene_reads_back() {
        let dir = std::env::temp_dir().join(format!("trackfill-synth-{}", std::process::id()));
        let s = generate(&SceneSpec {
            num_frames: 20,
            ..SceneSpec::default()
        })
        .unwrap();
        s.write(&dir).unwrap();
        let meta = mot_io::read_seqinfo(&mot_io::seqinfo_path(&dir)).unwrap();
        assert_eq!(meta, s.meta);
        let dets = mot_io::read_detections(&mot_io::det_path(&dir)).unwrap();
        assert_eq!(dets.len(), s.detections.len());
        let gt = mot_io::read_ground_truth(&mot_io::gt_path(&dir), Default::default()).unwrap();
        assert_eq!(gt.len(), s.ground_truth.len());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SceneSpec { num_objects: 0, ..SceneSpec::default() },
            SceneSpec { dropout_prob: 1.5, ..SceneSpec::default() },
            SceneSpec { families: vec![], ..SceneSpec::default() },
            SceneSpec { jitter_std: -1.0, ..SceneSpec::default() },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
