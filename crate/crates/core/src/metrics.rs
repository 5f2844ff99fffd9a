//! Center-distance detection metrics: greedy matching, true-positive errors,
//! interpolated AP and the composite detection score.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bevgrid::Box3D;

/// BEV center distance thresholds (m) averaged into mAP.
pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
const RECALL_POINTS: usize = 101;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no matched predictions")]
    NoMatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
}

impl Detection {
    pub fn class_id(&self) -> u32 {
        self.bbox.class_id
    }
}

fn bev_dist(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[2] - b.center[2])
}

/// Prediction indices by descending score, ties by index.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy score-descending matching: each prediction takes the nearest
/// unmatched same-class ground truth within `dist_threshold`. Returns the
/// matched ground-truth index for every prediction.
pub fn match_greedy(preds: &[Detection], gts: &[Box3D], dist_threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != preds[p].class_id() {
                continue;
            }
            let d = bev_dist(&preds[p].bbox, gt);
            if d <= dist_threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

/// Mean true-positive errors over a set of matched pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, aae: 1.0 };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// Absolute yaw difference wrapped to `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// `1 − IoU` of the two boxes after aligning centers and headings.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// True-positive errors over `(prediction, ground truth)` pairs. Class
/// accuracy is measured against the ground-truth class, so same-class
/// matching always yields `aae = 0`.
pub fn tp_errors(pairs: &[(Detection, Box3D)]) -> Result<TpErrors, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoMatches);
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors { ate: 0.0, ase: 0.0, aoe: 0.0, ave: 0.0, aae: 0.0 };
    for (p, g) in pairs {
        e.ate += bev_dist(&p.bbox, g);
        e.ase += scale_error(&p.bbox, g);
        e.aoe += yaw_error(p.bbox.yaw, g.yaw);
        e.ave += (p.bbox.velocity[0] - g.velocity[0]).hypot(p.bbox.velocity[1] - g.velocity[1]);
        e.aae += if p.class_id() == g.class_id { 0.0 } else { 1.0 };
    }
    for v in [&mut e.ate, &mut e.ase, &mut e.aoe, &mut e.ave, &mut e.aae] {
        *v /= n;
    }
    Ok(e)
}

/// One evaluation frame: predictions and ground truth of a scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Box3D>,
}

/// 101-point interpolated precision from score-sorted TP flags.
fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &t) in tp_flags.iter().enumerate() {
        tp += t as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: best precision at any recall at or beyond this point
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < rec.len() && rec[k] < level - 1e-12 {
            k += 1;
        }
        if k < rec.len() {
            sum += prec[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP of one class at one threshold, pooled over frames.
pub fn average_precision(frames: &[Frame], class_id: u32, dist_threshold: f64) -> f64 {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (f, frame) in frames.iter().enumerate() {
        let gts: Vec<Box3D> = frame.ground_truth.iter().filter(|b| b.class_id == class_id).copied().collect();
        let preds: Vec<Detection> = frame.detections.iter().filter(|d| d.class_id() == class_id).copied().collect();
        n_gt += gts.len();
        let m = match_greedy(&preds, &gts, dist_threshold);
        for (k, p) in preds.iter().enumerate() {
            scored.push((p.score, f, k, m[k].is_some()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = scored.iter().map(|s| s.3).collect();
    interpolated_ap(&flags, n_gt)
}

/// Classes present in the ground truth, ascending.
pub fn gt_classes(frames: &[Frame]) -> Vec<u32> {
    let mut c: Vec<u32> = frames.iter().flat_map(|f| f.ground_truth.iter().map(|b| b.class_id)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Mean AP over ground-truth classes and the given thresholds.
pub fn map_over(frames: &[Frame], thresholds: &[f64]) -> f64 {
    let classes = gt_classes(frames);
    if classes.is_empty() || thresholds.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in &classes {
        for &t in thresholds {
            sum += average_precision(frames, c, t);
        }
    }
    sum / (classes.len() * thresholds.len()) as f64
}

/// Composite score: `(5 · mAP + Σ (1 − min(1, mTP))) / 10`.
pub fn nds(map: f64, tp: &TpErrors) -> f64 {
    (5.0 * map + tp.as_array().iter().map(|&e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
}

impl EvalResult {
    pub fn tp(&self) -> TpErrors {
        TpErrors { ate: self.mate, ase: self.mase, aoe: self.maoe, ave: self.mave, aae: self.maae }
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("mAP", self.map),
            ("mATE (m)", self.mate),
            ("mASE", self.mase),
            ("mAOE (rad)", self.maoe),
            ("mAVE (m/s)", self.mave),
            ("mAAE", self.maae),
            ("NDS", self.nds),
        ];
        rows.iter().map(|(k, v)| format!("{k:<12}{v:>10.4}\n")).collect()
    }
}

/// Full evaluation: mAP over [`AP_THRESHOLDS`], class-averaged TP errors at
/// [`TP_THRESHOLD`] (a class without matches scores 1 on every error).
pub fn evaluate(frames: &[Frame]) -> EvalResult {
    let classes = gt_classes(frames);
    let map = map_over(frames, &AP_THRESHOLDS);
    let mut acc = [0.0; 5];
    for &c in &classes {
        let mut pairs = Vec::new();
        for f in frames {
            let gts: Vec<Box3D> = f.ground_truth.iter().filter(|b| b.class_id == c).copied().collect();
            let preds: Vec<Detection> = f.detections.iter().filter(|d| d.class_id() == c).copied().collect();
            for (p, m) in preds.iter().zip(match_greedy(&preds, &gts, TP_THRESHOLD)) {
                if let Some(g) = m {
                    pairs.push((*p, gts[g]));
                }
            }
        }
        let e = tp_errors(&pairs).unwrap_or(TpErrors::WORST);
        for (a, v) in acc.iter_mut().zip(e.as_array()) {
            *a += v;
        }
    }
    let tp = if classes.is_empty() {
        TpErrors::WORST
    } else {
        let n = classes.len() as f64;
        TpErrors { ate: acc[0] / n, ase: acc[1] / n, aoe: acc[2] / n, ave: acc[3] / n, aae: acc[4] / n }
    };
    EvalResult { map, mate: tp.ate, mase: tp.ase, maoe: tp.aoe, mave: tp.ave, maae: tp.aae, nds: nds(map, &tp) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, z: f64, class_id: u32) -> Box3D {
        Box3D { center: [x, -1.0, z], size: [2.0, 1.5, 4.0], yaw: 0.3, class_id, velocity: [1.0, -2.0] }
    }

    fn det(bbox: Box3D, score: f64) -> Detection {
        Detection { bbox, score }
    }

    #[test]
    fn identical_and_empty_matching() {
        let gts = vec![b(0.0, 10.0, 0), b(5.0, 12.0, 1), b(-4.0, 8.0, 0)];
        let preds: Vec<_> = gts.iter().map(|&g| det(g, 0.9)).collect();
        assert_eq!(match_greedy(&preds, &gts, 0.5), vec![Some(0), Some(1), Some(2)]);
        assert!(match_greedy(&[], &gts, 2.0).is_empty());
    }

    #[test]
    fn class_mismatch_never_matches() {
        let gts = vec![b(0.0, 10.0, 0)];
        assert_eq!(match_greedy(&[det(b(0.0, 10.0, 1), 1.0)], &gts, 4.0), vec![None]);
    }

    #[test]
    fn tp_error_examples() {
        let g = b(1.0, 9.0, 0);
        let e = tp_errors(&[(det(g, 1.0), g)]).unwrap();
        assert_eq!(e.as_array(), [0.0; 5]);
        let mut flipped = g;
        flipped.yaw += PI;
        assert!((tp_errors(&[(det(flipped, 1.0), g)]).unwrap().aoe - PI).abs() < 1e-12);
        let mut wide = g;
        wide.size[0] *= 2.0;
        assert!((tp_errors(&[(det(wide, 1.0), g)]).unwrap().ase - 0.5).abs() < 1e-12);
        assert_eq!(tp_errors(&[]), Err(MetricsError::NoMatches));
    }

    #[test]
    fn yaw_error_wraps() {
        assert!((yaw_error(3.1, -3.1) - (2.0 * PI - 6.2)).abs() < 1e-12);
        assert_eq!(yaw_error(0.5, 0.5), 0.0);
        assert!(yaw_error(10.0, -7.0) <= PI);
    }

    #[test]
    fn perfect_and_empty_ap() {
        let gts = vec![b(0.0, 10.0, 0), b(5.0, 12.0, 1)];
        let perfect = Frame { detections: gts.iter().map(|&g| det(g, 0.8)).collect(), ground_truth: gts.clone() };
        assert_eq!(map_over(&[perfect], &AP_THRESHOLDS), 1.0);
        let none = Frame { detections: vec![], ground_truth: gts };
        assert_eq!(map_over(&[none], &AP_THRESHOLDS), 0.0);
    }

    #[test]
    fn nds_examples() {
        let zero = TpErrors { ate: 0.0, ase: 0.0, aoe: 0.0, ave: 0.0, aae: 0.0 };
        assert_eq!(nds(1.0, &zero), 1.0);
        let big = TpErrors { ate: 1.0, ase: 3.0, aoe: 1.0, ave: 7.0, aae: 1.0 };
        assert_eq!(nds(0.0, &big), 0.0);
        let half = TpErrors { ate: 0.5, ase: 0.5, aoe: 0.5, ave: 0.5, aae: 0.5 };
        assert_eq!(nds(0.5, &half), 0.5);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let gts = vec![b(0.0, 10.0, 0), b(5.0, 12.0, 1), b(-9.0, -3.0, 2)];
        let f = Frame { detections: gts.iter().map(|&g| det(g, 1.0)).collect(), ground_truth: gts };
        let r = evaluate(&[f]);
        assert_eq!(r.nds, 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn eval_result_reproduces_composite() {
        let r = EvalResult { map: 0.4, mate: 0.3, mase: 0.2, maoe: 1.4, mave: 0.6, maae: 0.0, nds: 0.0 };
        let expect = (5.0 * 0.4 + 0.7 + 0.8 + 0.0 + 0.4 + 1.0) / 10.0;
        assert!((nds(r.map, &r.tp()) - expect).abs() < 1e-12);
    }
}
