//! Center-distance detection metrics: AP, true-positive errors, the
//! composite detection score and distance-binned AP.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, Box3D};
use crate::scenesim::{CLASSES, NUM_CLASSES};

const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// BEV center-distance thresholds (meters) averaged into mAP.
    pub thresholds: Vec<f64>,
    /// Threshold at which true-positive errors are measured.
    pub tp_threshold: f64,
    /// Ascending ego-distance bin edges; the last bin is open-ended.
    pub distance_bins: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            distance_bins: vec![0.0, 10.0, 20.0, 30.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0)) || !(self.tp_threshold > 0.0) {
            return Err(Error::invalid("distance thresholds must be positive"));
        }
        if self.distance_bins.is_empty() || self.distance_bins.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("distance bins must be strictly ascending"));
        }
        Ok(())
    }
}

/// Ground truth and predictions of one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleDetections {
    pub gt: Vec<Box3D>,
    pub preds: Vec<Box3D>,
}

/// `numpy.interp` for non-decreasing `xp`, with `right` past the end.
pub fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let n = xp.len();
    if n == 0 {
        return right;
    }
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[n - 1] {
        return right;
    }
    if x == xp[n - 1] {
        return fp[n - 1];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let (x0, x1) = (xp[j], xp[j + 1]);
    let slope = (fp[j + 1] - fp[j]) / (x1 - x0);
    slope * (x - x0) + fp[j]
}

/// Greedy matching of one class at one threshold: predictions in descending
/// score order take the nearest unmatched ground truth of the same sample
/// within `threshold`. Returns `(score, matched (sample, gt index))` in
/// visiting order and the number of ground-truth boxes.
fn greedy_match(samples: &[SampleDetections], class_id: usize, threshold: f64) -> (Vec<(f64, Option<(usize, usize)>, usize)>, usize) {
    let mut preds: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, d)| {
            d.preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.class_id == class_id)
                .map(move |(i, _)| (s, i))
        })
        .collect();
    preds.sort_by(|a, b| {
        let (pa, pb) = (&samples[a.0].preds[a.1], &samples[b.0].preds[b.1]);
        pb.score.total_cmp(&pa.score).then(a.cmp(b))
    });
    let npos = samples
        .iter()
        .map(|d| d.gt.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    let mut taken: Vec<Vec<bool>> = samples.iter().map(|d| vec![false; d.gt.len()]).collect();
    let mut out = Vec::with_capacity(preds.len());
    for (s, i) in preds {
        let p = &samples[s].preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in samples[s].gt.iter().enumerate() {
            if g.class_id != class_id || taken[s][j] {
                continue;
            }
            let d = p.bev_distance(g);
            if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[s][j] = true;
        }
        out.push((p.score, best.map(|(j, _)| (s, j)), i));
    }
    (out, npos)
}

/// Average precision of one class at one threshold: precision interpolated
/// on 101 recall points, restricted to recall above 0.1, shifted by the
/// 0.1 precision floor and renormalized. `None` without ground truth.
pub fn average_precision(samples: &[SampleDetections], class_id: usize, threshold: f64) -> Option<f64> {
    let (matches, npos) = greedy_match(samples, class_id, threshold);
    if npos == 0 {
        return None;
    }
    if matches.is_empty() {
        return Some(0.0);
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prec = Vec::with_capacity(matches.len());
    let mut rec = Vec::with_capacity(matches.len());
    for (_, m, _) in &matches {
        if m.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / npos as f64);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let curve: Vec<f64> = (first..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            (interp(r, &rec, &prec, 0.0) - MIN_PRECISION).max(0.0)
        })
        .collect();
    // Rounding can push a perfect curve a few ulps past 1.
    Some((curve.iter().sum::<f64>() / curve.len() as f64 / (1.0 - MIN_PRECISION)).min(1.0))
}

/// Mean true-positive errors. Each is 1 when there is no match.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub matches: usize,
}

impl TpErrors {
    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.ate, self.ase, self.aoe, self.ave]
    }
}

/// Absolute yaw difference wrapped into `[0, pi]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    let d = normalize_yaw(a - b).abs();
    d.min(2.0 * PI - d)
}

/// `1 - IoU` of the two sizes as centered, aligned boxes.
pub fn scale_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|k| a[k].min(b[k])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

/// Errors between matched pairs `(pred, gt)`.
pub fn tp_errors(pairs: &[(&Box3D, &Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors {
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            ave: 1.0,
            matches: 0,
        };
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&Box3D, &Box3D) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
    TpErrors {
        ate: mean(&|p, g| p.bev_distance(g)),
        ase: mean(&|p, g| scale_error(p.size, g.size)),
        aoe: mean(&|p, g| yaw_difference(p.yaw, g.yaw)),
        ave: mean(&|p, g| (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1])),
        matches: pairs.len(),
    }
}

/// Composite score `(5 mAP + sum(1 - min(1, x))) / (5 + len)`.
pub fn nds(map: f64, tp: &[f64]) -> Result<f64> {
    if tp.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::invalid("true-positive errors must be nonnegative"));
    }
    let s: f64 = tp.iter().map(|x| 1.0 - x.min(1.0)).sum();
    Ok((5.0 * map + s) / (5.0 + tp.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub num_gt: usize,
    /// AP per threshold, `None` without ground truth.
    pub ap: Vec<Option<f64>>,
    pub tp: TpErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: Option<f64>,
    pub num_gt: usize,
    /// `None` for an empty bin.
    pub map: Option<f64>,
}

/// Detection metrics over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub nds: f64,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassMetrics>,
    pub distance_bins: Vec<DistanceBin>,
}

/// Mean AP over classes with ground truth and all thresholds.
fn mean_ap(samples: &[SampleDetections], thresholds: &[f64]) -> Option<f64> {
    let aps: Vec<f64> = (0..NUM_CLASSES)
        .flat_map(|c| thresholds.iter().filter_map(move |&t| average_precision(samples, c, t)))
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn bin_of(edges: &[f64], d: f64) -> usize {
    edges.iter().rposition(|&e| d >= e).unwrap_or(0)
}

/// GTs by ego distance; predictions follow their matched GT (all-class
/// greedy matching at the TP threshold) or their own distance.
pub fn distance_binned_ap(samples: &[SampleDetections], cfg: &EvalConfig) -> Vec<DistanceBin> {
    let edges = &cfg.distance_bins;
    let mut parts: Vec<Vec<SampleDetections>> = vec![vec![SampleDetections::default(); samples.len()]; edges.len()];
    let mut counts = vec![0usize; edges.len()];
    for (s, d) in samples.iter().enumerate() {
        for g in &d.gt {
            let b = bin_of(edges, g.ego_distance());
            counts[b] += 1;
            parts[b][s].gt.push(g.clone());
        }
    }
    let mut pred_bin: Vec<Vec<Option<usize>>> = samples.iter().map(|d| vec![None; d.preds.len()]).collect();
    for c in 0..NUM_CLASSES {
        for (_, m, i) in greedy_match(samples, c, cfg.tp_threshold).0 {
            if let Some((s, j)) = m {
                pred_bin[s][i] = Some(bin_of(edges, samples[s].gt[j].ego_distance()));
            }
        }
    }
    for (s, d) in samples.iter().enumerate() {
        for (i, p) in d.preds.iter().enumerate() {
            let b = pred_bin[s][i].unwrap_or_else(|| bin_of(edges, p.ego_distance()));
            parts[b][s].preds.push(p.clone());
        }
    }
    edges
        .iter()
        .enumerate()
        .map(|(b, &lo)| DistanceBin {
            lo,
            hi: edges.get(b + 1).copied(),
            num_gt: counts[b],
            map: if counts[b] == 0 { None } else { mean_ap(&parts[b], &cfg.thresholds) },
        })
        .collect()
}

pub fn evaluate(samples: &[SampleDetections], cfg: &EvalConfig) -> Result<Metrics> {
    cfg.validate()?;
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for (c, class) in CLASSES.iter().enumerate() {
        let ap = cfg
            .thresholds
            .iter()
            .map(|&t| average_precision(samples, c, t))
            .collect();
        let (matches, num_gt) = greedy_match(samples, c, cfg.tp_threshold);
        let pairs: Vec<(&Box3D, &Box3D)> = matches
            .iter()
            .filter_map(|(_, m, i)| m.map(|(s, j)| (&samples[s].preds[*i], &samples[s].gt[j])))
            .collect();
        classes.push(ClassMetrics {
            name: class.name.to_string(),
            num_gt,
            ap,
            tp: tp_errors(&pairs),
        });
    }
    let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.num_gt > 0).collect();
    let map = mean_ap(samples, &cfg.thresholds).unwrap_or(0.0);
    let avg = |f: fn(&TpErrors) -> f64| {
        if present.is_empty() {
            1.0
        } else {
            present.iter().map(|c| f(&c.tp)).sum::<f64>() / present.len() as f64
        }
    };
    let (ate, ase, aoe, ave) = (avg(|t| t.ate), avg(|t| t.ase), avg(|t| t.aoe), avg(|t| t.ave));
    Ok(Metrics {
        map,
        nds: nds(map, &[ate, ase, aoe, ave])?,
        ate,
        ase,
        aoe,
        ave,
        thresholds: cfg.thresholds.clone(),
        classes,
        distance_bins: distance_binned_ap(samples, cfg),
    })
}

/// CSV of the distance-binned table: `lo,hi,num_gt,map` with empty fields
/// for open ends and empty bins.
pub fn distance_bins_csv(bins: &[DistanceBin]) -> String {
    let mut s = String::from("lo,hi,num_gt,map\n");
    for b in bins {
        let hi = b.hi.map(|v| v.to_string()).unwrap_or_default();
        let map = b.map.map(|v| format!("{:.6}", v)).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", b.lo, hi, b.num_gt, map));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, score: f64) -> Box3D {
        Box3D::new([x, y, 0.5], [4.5, 1.9, 1.6], 0.0).with_score(score)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![b(10.0, 0.0, 1.0), b(-5.0, 3.0, 1.0)];
        let s = vec![SampleDetections {
            gt: gt.clone(),
            preds: gt,
        }];
        let m = evaluate(&s, &EvalConfig::default()).unwrap();
        assert!((m.map - 1.0).abs() < 1e-12);
        assert_eq!((m.ate, m.ase, m.aoe, m.ave), (0.0, 0.0, 0.0, 0.0));
        assert!((m.nds - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nds_examples() {
        assert!((nds(0.744, &[0.241, 0.229, 0.278, 0.154, 0.118]).unwrap() - 0.770).abs() < 5e-4);
        assert_eq!(nds(0.0, &[1.0, 2.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!(nds(0.5, &[-0.1]).is_err());
    }

    #[test]
    fn error_examples() {
        assert!((scale_error([2.0; 3], [1.0; 3]) - 0.875).abs() < 1e-12);
        assert!((yaw_difference(PI, 0.0) - PI).abs() < 1e-12);
        assert!((yaw_difference(3.0, -3.0) - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn interp_matches_numpy_semantics() {
        let xp = [0.2, 0.2, 0.5, 1.0];
        let fp = [1.0, 0.8, 0.6, 0.4];
        assert_eq!(interp(0.1, &xp, &fp, 0.0), 1.0);
        assert_eq!(interp(0.2, &xp, &fp, 0.0), 0.8);
        assert!((interp(0.35, &xp, &fp, 0.0) - 0.7).abs() < 1e-12);
        assert_eq!(interp(1.0, &xp, &fp, 0.0), 0.4);
        assert_eq!(interp(0.9, &[0.5], &[1.0], 0.0), 0.0);
    }

    #[test]
    fn empty_bins_are_absent() {
        let gt = vec![b(5.0, 0.0, 1.0)];
        let s = vec![SampleDetections {
            gt: gt.clone(),
            preds: gt,
        }];
        let bins = distance_binned_ap(&s, &EvalConfig::default());
        assert!((bins[0].map.unwrap() - 1.0).abs() < 1e-12);
        assert!(bins[1..].iter().all(|b| b.map.is_none()));
        assert!(distance_bins_csv(&bins).lines().nth(2).unwrap().ends_with(','));
    }
}
