//! CLEAR-MOT and identity metrics.
//!
//! Per-frame matching keeps last frame's GT-to-prediction correspondences
//! while their IOU still clears the threshold, then fills the rest with a
//! minimum-cost assignment on `1 - IOU`. IDF1 uses one global matching of
//! GT identities to predicted identities that maximizes co-matched frames.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::assignment::{self, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::mot_io::LabeledBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
const MOSTLY_TRACKED: f64 = 0.8;
const MOSTLY_LOST: f64 = 0.2;

/// Raw counts plus the ratios derived from them. Reports for several
/// sequences combine by summing counts, see [`MetricsReport::combine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: usize,
    /// Percent of GT trajectories covered for at least 80% of their frames.
    pub mostly_tracked: f64,
    /// Percent of GT trajectories covered for at most 20% of their frames.
    pub mostly_lost: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub matches: usize,
    pub idtp: usize,
    pub gt_tracks: usize,
    pub mt_tracks: usize,
    pub ml_tracks: usize,
}

impl MetricsReport {
    fn from_counts(c: Counts) -> Self {
        let errors = c.false_negatives + c.false_positives + c.id_switches;
        // an empty ground truth scores 1 only if nothing was predicted
        let mota = if c.gt_count == 0 {
            if errors == 0 { 1.0 } else { -(errors as f64) }
        } else {
            1.0 - errors as f64 / c.gt_count as f64
        };
        let denom = c.gt_count + c.pred_count;
        let idf1 = if denom == 0 { 1.0 } else { 2.0 * c.idtp as f64 / denom as f64 };
        let pct = |n: usize| {
            if c.gt_tracks == 0 { 0.0 } else { 100.0 * n as f64 / c.gt_tracks as f64 }
        };
        MetricsReport {
            mota,
            idf1,
            id_switches: c.id_switches,
            mostly_tracked: pct(c.mt_tracks),
            mostly_lost: pct(c.ml_tracks),
            false_positives: c.false_positives,
            false_negatives: c.false_negatives,
            gt_count: c.gt_count,
            pred_count: c.pred_count,
            matches: c.matches,
            idtp: c.idtp,
            gt_tracks: c.gt_tracks,
            mt_tracks: c.mt_tracks,
            ml_tracks: c.ml_tracks,
        }
    }

    fn counts(&self) -> Counts {
        Counts {
            id_switches: self.id_switches,
            false_positives: self.false_positives,
            false_negatives: self.false_negatives,
            gt_count: self.gt_count,
            pred_count: self.pred_count,
            matches: self.matches,
            idtp: self.idtp,
            gt_tracks: self.gt_tracks,
            mt_tracks: self.mt_tracks,
            ml_tracks: self.ml_tracks,
        }
    }

    /// Sums raw counts across sequences and recomputes the ratios.
    pub fn combine(reports: &[MetricsReport]) -> MetricsReport {
        let mut total = Counts::default();
        for r in reports {
            total.add(&r.counts());
        }
        MetricsReport::from_counts(total)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mota", format!("{:.6}", self.mota)),
            ("idf1", format!("{:.6}", self.idf1)),
            ("ids", self.id_switches.to_string()),
            ("mt", format!("{:.2}", self.mostly_tracked)),
            ("ml", format!("{:.2}", self.mostly_lost)),
            ("fp", self.false_positives.to_string()),
            ("fn", self.false_negatives.to_string()),
            ("gt_count", self.gt_count.to_string()),
            ("pred_count", self.pred_count.to_string()),
            ("matches", self.matches.to_string()),
            ("idtp", self.idtp.to_string()),
            ("gt_tracks", self.gt_tracks.to_string()),
        ]
    }

    /// One `key=value` line per metric.
    pub fn to_key_values(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Aligned table with one row per named report.
    pub fn table(rows: &[(String, MetricsReport)]) -> String {
        let headers = ["MOTA", "IDF1", "IDs", "MT%", "ML%", "FP", "FN", "GT"];
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|(name, r)| {
                vec![
                    name.clone(),
                    format!("{:.1}", 100.0 * r.mota),
                    format!("{:.1}", 100.0 * r.idf1),
                    r.id_switches.to_string(),
                    format!("{:.1}", r.mostly_tracked),
                    format!("{:.1}", r.mostly_lost),
                    r.false_positives.to_string(),
                    r.false_negatives.to_string(),
                    r.gt_count.to_string(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = std::iter::once("sequence")
            .chain(headers)
            .map(str::len)
            .collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let header: Vec<String> = std::iter::once("sequence")
            .chain(headers)
            .map(String::from)
            .collect();
        for row in std::iter::once(&header).chain(&cells) {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    id_switches: usize,
    false_positives: usize,
    false_negatives: usize,
    gt_count: usize,
    pred_count: usize,
    matches: usize,
    idtp: usize,
    gt_tracks: usize,
    mt_tracks: usize,
    ml_tracks: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.id_switches += o.id_switches;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
        self.gt_count += o.gt_count;
        self.pred_count += o.pred_count;
        self.matches += o.matches;
        self.idtp += o.idtp;
        self.gt_tracks += o.gt_tracks;
        self.mt_tracks += o.mt_tracks;
        self.ml_tracks += o.ml_tracks;
    }
}

/// Groups boxes by frame and rejects repeated `(frame, id)` pairs.
fn by_frame<'a>(boxes: &'a [LabeledBox], side: &str) -> Result<BTreeMap<u32, Vec<&'a LabeledBox>>> {
    let mut seen = BTreeSet::new();
    let mut out: BTreeMap<u32, Vec<&LabeledBox>> = BTreeMap::new();
    for b in boxes {
        if !seen.insert((b.frame, b.id)) {
            return Err(Error::Input(format!(
                "duplicate {side} id {} in frame {}",
                b.id, b.frame
            )));
        }
        out.entry(b.frame).or_default().push(b);
    }
    for v in out.values_mut() {
        v.sort_by_key(|b| b.id);
    }
    Ok(out)
}

pub fn evaluate(gt: &[LabeledBox], pred: &[LabeledBox], iou_threshold: f64) -> Result<MetricsReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Input(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    let gt_frames = by_frame(gt, "ground-truth")?;
    let pred_frames = by_frame(pred, "prediction")?;
    let frames: BTreeSet<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();

    let mut c = Counts {
        gt_count: gt.len(),
        pred_count: pred.len(),
        ..Counts::default()
    };
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    let mut covered: HashMap<i64, usize> = HashMap::new();
    // (gt id, pred id) -> frames where both are present and overlap enough
    let mut overlap: HashMap<(i64, i64), usize> = HashMap::new();
    let empty = Vec::new();

    for f in frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let p = pred_frames.get(&f).unwrap_or(&empty);
        let ious: Vec<Vec<f64>> = g
            .iter()
            .map(|gb| p.iter().map(|pb| iou(&gb.bbox, &pb.bbox)).collect())
            .collect();
        for (i, gb) in g.iter().enumerate() {
            for (j, pb) in p.iter().enumerate() {
                if ious[i][j] >= iou_threshold {
                    *overlap.entry((gb.id, pb.id)).or_default() += 1;
                }
            }
        }

        let mut gt_to_pred: Vec<Option<usize>> = vec![None; g.len()];
        let mut pred_taken = vec![false; p.len()];
        for (i, gb) in g.iter().enumerate() {
            let Some(&prev) = last_match.get(&gb.id) else { continue };
            if let Some(j) = p.iter().position(|pb| pb.id == prev) {
                if !pred_taken[j] && ious[i][j] >= iou_threshold {
                    gt_to_pred[i] = Some(j);
                    pred_taken[j] = true;
                }
            }
        }
        let free_g: Vec<usize> = (0..g.len()).filter(|&i| gt_to_pred[i].is_none()).collect();
        let free_p: Vec<usize> = (0..p.len()).filter(|&j| !pred_taken[j]).collect();
        let mut cost = CostMatrix::new(free_g.len(), free_p.len());
        for (a, &i) in free_g.iter().enumerate() {
            for (b, &j) in free_p.iter().enumerate() {
                if ious[i][j] >= iou_threshold {
                    cost.set(a, b, 1.0 - ious[i][j])?;
                } else {
                    cost.forbid(a, b);
                }
            }
        }
        for (a, b) in assignment::solve(&cost) {
            let (i, j) = (free_g[a], free_p[b]);
            gt_to_pred[i] = Some(j);
            if last_match.get(&g[i].id).is_some_and(|&prev| prev != p[j].id) {
                c.id_switches += 1;
            }
        }
        for (i, m) in gt_to_pred.iter().enumerate() {
            if let Some(j) = *m {
                last_match.insert(g[i].id, p[j].id);
                *covered.entry(g[i].id).or_default() += 1;
                c.matches += 1;
            }
        }
    }
    c.false_negatives = c.gt_count - c.matches;
    c.false_positives = c.pred_count - c.matches;

    let mut lifespan: BTreeMap<i64, usize> = BTreeMap::new();
    for b in gt {
        *lifespan.entry(b.id).or_default() += 1;
    }
    c.gt_tracks = lifespan.len();
    for (id, &len) in &lifespan {
        let ratio = covered.get(id).copied().unwrap_or(0) as f64 / len as f64;
        if ratio >= MOSTLY_TRACKED {
            c.mt_tracks += 1;
        } else if ratio <= MOSTLY_LOST {
            c.ml_tracks += 1;
        }
    }

    c.idtp = identity_true_positives(gt, pred, &overlap)?;
    Ok(MetricsReport::from_counts(c))
}

/// Best achievable co-matched frame count under a one-to-one identity map.
fn identity_true_positives(
    gt: &[LabeledBox],
    pred: &[LabeledBox],
    overlap: &HashMap<(i64, i64), usize>,
) -> Result<usize> {
    let gt_ids: Vec<i64> = gt.iter().map(|b| b.id).collect::<BTreeSet<_>>().into_iter().collect();
    let pred_ids: Vec<i64> = pred.iter().map(|b| b.id).collect::<BTreeSet<_>>().into_iter().collect();
    // every pair stays allowed so the solver maximizes overlap, not pair count
    let mut cost = CostMatrix::new(gt_ids.len(), pred_ids.len());
    for (a, g) in gt_ids.iter().enumerate() {
        for (b, p) in pred_ids.iter().enumerate() {
            let o = overlap.get(&(*g, *p)).copied().unwrap_or(0);
            cost.set(a, b, -(o as f64))?;
        }
    }
    Ok(assignment::solve(&cost)
        .into_iter()
        .map(|(a, b)| overlap.get(&(gt_ids[a], pred_ids[b])).copied().unwrap_or(0))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn lb(frame: u32, id: i64, x: f64) -> LabeledBox {
        LabeledBox {
            frame,
            id,
            bbox: BoundingBox::new(x, 50.0, 40.0, 80.0).unwrap(),
        }
    }

    fn line(id: i64, frames: std::ops::RangeInclusive<u32>) -> Vec<LabeledBox> {
        frames.map(|f| lb(f, id, 10.0 * f as f64 + 100.0 * id as f64)).collect()
    }

    #[test]
    fn perfect() {
        let gt: Vec<_> = [line(1, 1..=10), line(2, 3..=8)].concat();
        let r = evaluate(&gt, &gt, 0.5).unwrap();
        assert_eq!(r.mota, 1.0);
        assert_eq!(r.idf1, 1.0);
        assert_eq!((r.id_switches, r.false_positives, r.false_negatives), (0, 0, 0));
        assert_eq!(r.mostly_tracked, 100.0);
        assert_eq!(r.mostly_lost, 0.0);
    }

    #[test]
    fn empty_prediction() {
        let gt = line(1, 1..=10);
        let r = evaluate(&gt, &[], 0.5).unwrap();
        assert_eq!((r.false_negatives, r.false_positives), (10, 0));
        assert_eq!(r.mota, 0.0);
        assert_eq!(r.idf1, 0.0);
        assert_eq!(r.mostly_lost, 100.0);
    }

    #[test]
    fn split_identity() {
        let gt = line(1, 1..=10);
        let pred: Vec<_> = gt
            .iter()
            .map(|b| LabeledBox {
                id: if b.frame <= 5 { 7 } else { 9 },
                ..*b
            })
            .collect();
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!(r.id_switches, 1);
        assert!((r.mota - 0.9).abs() < 1e-12);
        assert_eq!(r.idtp, 5);
        assert!((r.idf1 - 0.5).abs() < 1e-12);
        assert_eq!(r.mostly_tracked, 100.0);
    }

    #[test]
    fn match_persists_over_closer_candidate() {
        // frame 2 offers a better-overlapping pred id; the old match still
        // clears the threshold and must be kept, so no switch
        let gt = vec![lb(1, 1, 0.0), lb(2, 1, 0.0)];
        let pred = vec![lb(1, 5, 0.0), lb(2, 5, 8.0), lb(2, 6, 0.0)];
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.false_positives, 1);
    }

    #[test]
    fn duplicates_rejected() {
        let gt = vec![lb(1, 1, 0.0), lb(1, 1, 5.0)];
        assert!(matches!(evaluate(&gt, &[], 0.5), Err(Error::Input(_))));
        assert!(matches!(evaluate(&[], &gt, 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn relabeling_predictions_is_invisible_to_idf1() {
        let gt: Vec<_> = [line(1, 1..=12), line(2, 1..=12), line(3, 4..=9)].concat();
        let mut pred = gt.clone();
        for b in &mut pred {
            if b.frame > 6 && b.id == 2 {
                b.id = 4;
            }
        }
        let base = evaluate(&gt, &pred, 0.5).unwrap();
        let relabeled: Vec<_> = pred.iter().map(|b| LabeledBox { id: 100 - b.id, ..*b }).collect();
        let r = evaluate(&gt, &relabeled, 0.5).unwrap();
        assert_eq!(base, r);
    }

    #[test]
    fn injected_errors_lower_mota() {
        let gt: Vec<_> = [line(1, 1..=10), line(2, 1..=10)].concat();
        let perfect = evaluate(&gt, &gt, 0.5).unwrap().mota;
        let mut with_fp = gt.clone();
        with_fp.push(lb(3, 9, 900.0));
        let mut with_fn = gt.clone();
        with_fn.remove(4);
        let with_ids: Vec<_> = gt
            .iter()
            .map(|b| LabeledBox {
                id: if b.id == 1 && b.frame > 5 { 3 } else { b.id },
                ..*b
            })
            .collect();
        for pred in [with_fp, with_fn, with_ids] {
            assert!(evaluate(&gt, &pred, 0.5).unwrap().mota < perfect);
        }
    }

    #[test]
    fn combine_sums_counts() {
        let a = evaluate(&line(1, 1..=10), &[], 0.5).unwrap();
        let b = evaluate(&line(1, 1..=10), &line(1, 1..=10), 0.5).unwrap();
        let c = MetricsReport::combine(&[a, b]);
        assert_eq!(c.gt_count, 20);
        assert!((c.mota - 0.5).abs() < 1e-12);
        assert!((c.idf1 - 2.0 * 10.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn reports_render() {
        let r = evaluate(&line(1, 1..=4), &line(1, 1..=4), 0.5).unwrap();
        let kv = r.to_key_values();
        assert!(kv.starts_with("mota=1.000000\nidf1=1.000000\n"));
        let t = MetricsReport::table(&[("seq-a".into(), r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
