//! Average-precision evaluation of predicted boxes against ground truth.
//!
//! Matching is greedy per frame and class: predictions in descending score
//! order each take the unmatched truth of highest IoU, if that IoU reaches the
//! threshold. Truths are binned by their BEV range; a matched prediction
//! follows its truth into that bin, an unmatched one is binned by its own range.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use fusebox_core::geometry::{bev_iou, iou3d, Box3D};
use fusebox_core::io::BoxRecord;
use fusebox_core::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMode::Bev => bev_iou(&a.bev(), &b.bev()),
            IouMode::ThreeD => iou3d(a, b),
        }
    }
}

/// How the precision-recall curve is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    Eleven,
    /// Mean envelope precision at recall 1/40, 2/40, …, 1.
    Forty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub iou_threshold: f64,
    pub mode: IouMode,
    pub range_bins: Vec<f64>,
    pub interpolation: ApInterpolation,
    /// Classes to report; empty means every class present in the truth.
    pub classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinReport {
    pub min_range: f64,
    pub max_range: f64,
    /// `None` when the bin holds no truth.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: ClassId,
    pub bins: Vec<BinReport>,
    /// Over the whole evaluated range.
    pub overall: BinReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean overall AP over classes that have truth.
    pub map: Option<f64>,
}

impl EvalReport {
    pub fn class(&self, class: ClassId) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class_id == class)
    }
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.classes {
            let name = c
                .class_id
                .name()
                .map_or_else(|| c.class_id.to_string(), str::to_string);
            write!(f, "{name:<12} all {}", fmt_ap(c.overall.ap))?;
            for b in &c.bins {
                write!(f, "  {}-{} {}", b.min_range, b.max_range, fmt_ap(b.ap))?;
            }
            writeln!(
                f,
                "  (tp {} fp {} fn {})",
                c.overall.tp, c.overall.fp, c.overall.fn_
            )?;
        }
        writeln!(f, "mAP {}", fmt_ap(self.map))
    }
}

/// Greedy one-to-one matching. Returns, for each prediction, the index of its
/// matched truth.
pub fn greedy_match(
    preds: &[Box3D],
    truths: &[Box3D],
    threshold: f64,
    mode: IouMode,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; truths.len()];
    let mut matches = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, truth) in truths.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = mode.iou(&preds[i], truth);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matches[i] = Some(j);
        }
    }
    matches
}

/// AP of a ranked list of true/false positives against `num_truth` truths.
pub fn average_precision(
    ranked_tp: &[bool],
    num_truth: usize,
    interpolation: ApInterpolation,
) -> Option<f64> {
    if num_truth == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked_tp.len());
    for (rank, &hit) in ranked_tp.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / num_truth as f64, tp as f64 / (rank + 1) as f64));
    }
    // Envelope: best precision at this recall or beyond.
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }
    let at_recall = |r: f64| {
        curve
            .iter()
            .position(|&(rec, _)| rec >= r - 1e-12)
            .map_or(0.0, |k| envelope[k])
    };
    let ap = match interpolation {
        ApInterpolation::AllPoint => ranked_tp
            .iter()
            .zip(&envelope)
            .filter(|(hit, _)| **hit)
            .map(|(_, p)| p / num_truth as f64)
            .sum(),
        ApInterpolation::Eleven => {
            (0..=10)
                .map(|k| at_recall(f64::from(k) / 10.0))
                .sum::<f64>()
                / 11.0
        }
        ApInterpolation::Forty => {
            (1..=40)
                .map(|k| at_recall(f64::from(k) / 40.0))
                .sum::<f64>()
                / 40.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

struct Candidate {
    score: f64,
    range: f64,
    truth_range: Option<f64>,
}

fn in_bin(range: f64, lo: f64, hi: f64) -> bool {
    range >= lo && range < hi
}

fn bin_report(
    candidates: &[Candidate],
    truth_ranges: &[f64],
    lo: f64,
    hi: f64,
    interp: ApInterpolation,
) -> BinReport {
    let ranked: Vec<bool> = candidates
        .iter()
        .filter_map(|c| match c.truth_range {
            Some(r) => in_bin(r, lo, hi).then_some(true),
            None => in_bin(c.range, lo, hi).then_some(false),
        })
        .collect();
    let num_truth = truth_ranges.iter().filter(|&&r| in_bin(r, lo, hi)).count();
    let tp = ranked.iter().filter(|&&t| t).count();
    BinReport {
        min_range: lo,
        max_range: hi,
        ap: average_precision(&ranked, num_truth, interp),
        tp,
        fp: ranked.len() - tp,
        fn_: num_truth - tp,
    }
}

fn by_frame(records: &[BoxRecord], class: ClassId) -> BTreeMap<&str, Vec<&Box3D>> {
    let mut map: BTreeMap<&str, Vec<&Box3D>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.bbox.class_id == class) {
        map.entry(r.frame_id.as_str()).or_default().push(&r.bbox);
    }
    map
}

pub fn evaluate_ap(preds: &[BoxRecord], truths: &[BoxRecord], params: &EvalParams) -> EvalReport {
    let classes: Vec<ClassId> = if params.classes.is_empty() {
        let mut seen: Vec<ClassId> = truths.iter().map(|r| r.bbox.class_id).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    } else {
        params.classes.clone()
    };
    let max_range = *params.range_bins.last().expect("range bins validated");
    let mut reports = Vec::with_capacity(classes.len());
    for class in classes {
        let pred_frames = by_frame(preds, class);
        let truth_frames = by_frame(truths, class);
        let mut candidates = Vec::new();
        let mut truth_ranges = Vec::new();
        let frames: std::collections::BTreeSet<&str> = pred_frames
            .keys()
            .chain(truth_frames.keys())
            .copied()
            .collect();
        for frame in frames {
            let p: Vec<Box3D> = pred_frames
                .get(frame)
                .map_or_else(Vec::new, |v| v.iter().map(|b| (*b).clone()).collect());
            let t: Vec<Box3D> = truth_frames
                .get(frame)
                .map_or_else(Vec::new, |v| v.iter().map(|b| (*b).clone()).collect());
            let matches = greedy_match(&p, &t, params.iou_threshold, params.mode);
            truth_ranges.extend(t.iter().map(|b| b.center.bev_range()));
            for (pred, m) in p.iter().zip(matches) {
                candidates.push(Candidate {
                    score: pred.score,
                    range: pred.center.bev_range(),
                    truth_range: m.map(|j| t[j].center.bev_range()),
                });
            }
        }
        // Stable: equal scores keep frame then input order.
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        let bins = params
            .range_bins
            .windows(2)
            .map(|w| bin_report(&candidates, &truth_ranges, w[0], w[1], params.interpolation))
            .collect();
        let overall = bin_report(
            &candidates,
            &truth_ranges,
            0.0,
            max_range,
            params.interpolation,
        );
        reports.push(ClassReport {
            class_id: class,
            bins,
            overall,
        });
    }
    let aps: Vec<f64> = reports.iter().filter_map(|c| c.overall.ap).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    EvalReport {
        classes: reports,
        map,
    }
}
