use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackfill_core::metrics::{self, MetricsReport};
use trackfill_core::mot_io::{self, GtFilter};
use trackfill_core::pipeline::{self, SequenceData};
use trackfill_core::scorer::{MotionScorer, TrackStatus};
use trackfill_core::synth;
use trackfill_core::tracker::Tracker;
use trackfill_core::{Codebook, Error, ModelWeights, RunConfig};

use crate::{Cli, Command, DemoArgs, EvalArgs, FitArgs, SynthArgs, TrackArgs, TrainArgs};

/// 3 for anything rooted in configuration, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))));
    if config {
        3
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::Synth(a) => synth_cmd(&cfg, a),
        Command::FitCodebook(a) => fit_cmd(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Track(a) => track_cmd(cfg, a),
        Command::Evaluate(a) => eval_cmd(&cfg, a),
        Command::InpaintDemo(a) => demo_cmd(&cfg, a),
    }
}

/// Flag value, else the config value, else a configuration error.
fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| config.clone()) {
        Some(p) => Ok(p),
        None => Err(Error::Config(format!("no {name} path: pass --{name} or set paths.{name}")).into()),
    }
}

fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(codebook: &Path, weights: &Path) -> Result<(Codebook, ModelWeights)> {
    let book = Codebook::load(codebook)?;
    let model = ModelWeights::load(weights, &book)?;
    Ok((book, model))
}

fn synth_cmd(cfg: &RunConfig, a: SynthArgs) -> Result<()> {
    if a.sequences == 0 {
        bail!(Error::Config("--sequences must be positive".into()));
    }
    let base = cfg.scene();
    for i in 0..a.sequences {
        let spec = synth::SceneSpec {
            name: format!("{}-{:02}", base.name, i + 1),
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let scene = synth::generate(&spec)?;
        let dir = a.out.join(&spec.name);
        scene.write(&dir)?;
        println!(
            "{}: {} gt boxes, {} detections",
            dir.display(),
            scene.ground_truth.len(),
            scene.detections.len()
        );
    }
    Ok(())
}

fn fit_cmd(mut cfg: RunConfig, a: FitArgs) -> Result<()> {
    if let Some(k) = a.k {
        cfg.codebook.k = k;
    }
    let cfg = validated(cfg)?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.codebook, "codebook")?;
    let seqs = pipeline::load_training_set(&data)?;
    let book = pipeline::fit_codebook(&seqs, &cfg)?;
    book.save(&out)?;
    println!("{}: k = {} from {} trajectories", out.display(), book.k(), seqs.len());
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let cfg = validated(cfg)?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let codebook = required(a.codebook, &cfg.paths.codebook, "codebook")?;
    let out = required(a.out, &cfg.paths.weights, "weights")?;
    let book = Codebook::load(&codebook)?;
    let seqs = pipeline::load_training_set(&data)?;
    let outcome = pipeline::train_model(&seqs, &book, &cfg)?;
    outcome.weights.save(&out)?;
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
    println!(
        "{}: {} iterations, final loss {:.4}",
        out.display(),
        outcome.losses.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    Ok(())
}

fn track_cmd(mut cfg: RunConfig, a: TrackArgs) -> Result<()> {
    if a.no_inpaint {
        cfg.tracker.inpaint.num_samples = 0;
    }
    let cfg = validated(cfg)?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let codebook = required(a.codebook, &cfg.paths.codebook, "codebook")?;
    let weights = required(a.weights, &cfg.paths.weights, "weights")?;
    let out = required(a.out, &cfg.paths.output, "output")?;
    if a.jobs == 0 {
        bail!(Error::Config("--jobs must be positive".into()));
    }
    let (book, model) = load_model(&codebook, &weights)?;
    let dirs = pipeline::find_sequences(&data)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<(String, Option<MetricsReport>)>>>> =
        dirs.iter().map(|_| Mutex::new(None)).collect();
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(dir) = dirs.get(i) else { break };
        let res = (|| {
            let seq = SequenceData::load(dir)?;
            let tracked = pipeline::track_sequence(&seq, &model, &book, &cfg)?;
            let path = out.join(format!("{}.txt", seq.meta.name));
            std::fs::write(&path, &tracked.text).with_context(|| format!("writing {}", path.display()))?;
            Ok((seq.meta.name, tracked.metrics))
        })();
        *slots[i].lock().unwrap() = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(dirs.len()) {
            s.spawn(work);
        }
    });

    let mut rows = Vec::new();
    for slot in slots {
        let (name, metrics) = slot.into_inner().unwrap().expect("every sequence processed")?;
        println!("{}", out.join(format!("{name}.txt")).display());
        if let Some(m) = metrics {
            rows.push((name, m));
        }
    }
    if !rows.is_empty() {
        let overall = MetricsReport::combine(&rows.iter().map(|(_, m)| *m).collect::<Vec<_>>());
        rows.push(("OVERALL".into(), overall));
        let table = MetricsReport::table(&rows);
        print!("{table}");
        write_file(&out.join("metrics.txt"), &table)?;
        write_file(&out.join("metrics.kv"), &overall.to_key_values())?;
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let threshold = a.iou.unwrap_or(cfg.eval_iou_threshold);
    if !(threshold > 0.0 && threshold <= 1.0) {
        bail!(Error::Config(format!("--iou {threshold} outside (0, 1]")));
    }
    let gt = mot_io::read_ground_truth(&a.gt, GtFilter::default())?;
    let pred = mot_io::read_results(&a.pred)?;
    let report = metrics::evaluate(&gt, &pred, threshold)?;
    let name = a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    print!("{}", MetricsReport::table(&[(name, report)]));
    if let Some(out) = a.out {
        write_file(&out, &report.to_key_values())?;
    }
    Ok(())
}

/// Replays the tracker up to the first frame (at or after `--frame`) where
/// the chosen tracklet is in a gap and detections are present, then samples
/// the inpainting branches against all of that frame's detections.
fn demo_cmd(cfg: &RunConfig, a: DemoArgs) -> Result<()> {
    cfg.validate()?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let codebook = required(a.codebook, &cfg.paths.codebook, "codebook")?;
    let weights = required(a.weights, &cfg.paths.weights, "weights")?;
    let (book, model) = load_model(&codebook, &weights)?;
    let seq = SequenceData::load(&data)?;
    let tcfg = cfg.tracker_for(seq.meta.frame_rate);
    let params = tcfg.inpaint;
    let frames = seq.frames();
    let mut tracker = Tracker::new(&model, &book, seq.meta.geometry, tcfg)?;
    let scorer = MotionScorer::new(&model, &book, seq.meta.geometry)?;

    for k in 0..frames.len() {
        let frame = k as u32 + 1;
        let end = (k + 1 + params.lookahead).min(frames.len());
        if frame >= a.frame && !frames[k].is_empty() {
            let pick = tracker.tracklets().iter().find(|t| {
                t.status == TrackStatus::Gapped && a.track.is_none_or(|id| t.id == id)
            });
            if let Some(t) = pick {
                let window: Vec<Vec<_>> = frames[k..end]
                    .iter()
                    .map(|f| f.iter().map(|d| d.bbox).collect())
                    .collect();
                let gap = t.gap_length as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                let report = scorer.inpaint(t, gap, &window, &params, &mut rng)?;
                let first = frame - gap as u32;
                let selected = report.selected.as_ref().map(|c| c.branch);
                let mut csv = String::from("track,branch,frame,kind,x,y,w,h,log_likelihood,iou_score,rejected,selected\n");
                for (b, branch) in report.branches.iter().enumerate() {
                    for (s, bx) in branch.boxes.iter().enumerate() {
                        let f = first + s as u32;
                        let kind = if f < frame { "gap" } else if f == frame { "current" } else { "lookahead" };
                        let _ = writeln!(
                            csv,
                            "{},{b},{f},{kind},{:.2},{:.2},{:.2},{:.2},{:.6},{:.6},{},{}",
                            t.id,
                            bx.x,
                            bx.y,
                            bx.w,
                            bx.h,
                            branch.log_likelihood,
                            branch.iou_score,
                            u8::from(branch.rejected),
                            u8::from(selected == Some(b))
                        );
                    }
                }
                for b in t.boxes.iter().rev().take(10).rev() {
                    let _ = writeln!(
                        csv,
                        "{},-1,{},history,{:.2},{:.2},{:.2},{:.2},,,,",
                        t.id, b.frame, b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h
                    );
                }
                write_file(&a.out, &csv)?;
                match selected {
                    Some(b) => println!("track {} gap {gap} at frame {frame}: selected branch {b}", t.id),
                    None => println!("track {} gap {gap} at frame {frame}: every branch rejected", t.id),
                }
                return Ok(());
            }
        }
        tracker.process_frame(frame, &frames[k], &frames[k + 1..end])?;
    }
    bail!("no gapped tracklet found from frame {}", a.frame)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
