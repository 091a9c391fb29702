use serde::{Deserialize, Serialize};

use super::matching::hungarian;
use super::{box_to_params, LayerTrace, ModelConfig, BOX_PARAMS};
use crate::error::Result;
use crate::geometry::Box3D;
use crate::scenesim::NUM_CLASSES;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::uaf::oracle_distance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    /// Matching cost weight of `1 - p(gt class)`.
    pub cost_class: f64,
    /// Matching cost weight of the weighted box L1.
    pub cost_box: f64,
    /// Per-entry weights of the box parameter L1.
    pub box_weights: [f64; BOX_PARAMS],
    pub weight_class: f64,
    pub weight_box: f64,
    pub weight_uncertainty: f64,
    pub weight_regression: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            cost_class: 2.0,
            cost_box: 1.0,
            box_weights: [1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2],
            weight_class: 2.0,
            weight_box: 1.0,
            weight_uncertainty: 0.5,
            weight_regression: 0.5,
        }
    }
}

/// Loss terms summed over layers (each already divided by the number of
/// ground-truth boxes).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub box_l1: f64,
    pub uncertainty: f64,
    pub regression: f64,
    pub total: f64,
}

/// Sigmoid focal loss with exponent 2, summed over all entries.
/// `targets` holds 0/1 labels shaped like `logits`.
pub fn focal_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>, alpha: f64) -> Result<Var> {
    let p = tape.sigmoid(logits);
    let neg_p = tape.scale(p, -T::one())?;
    let one_minus = tape.add_scalar(neg_p, T::one())?;
    let neg_x = tape.scale(logits, -T::one())?;
    // -log p = softplus(-x), -log(1 - p) = softplus(x)
    let nll_pos = tape.softplus(neg_x);
    let nll_neg = tape.softplus(logits);
    let pos_coef = tape.constant(targets.map(|y| T::lit(alpha) * y));
    let neg_coef = tape.constant(targets.map(|y| T::lit(1.0 - alpha) * (T::one() - y)));
    let sq = tape.mul(one_minus, one_minus)?;
    let pos = tape.mul(sq, nll_pos)?;
    let pos = tape.mul(pos, pos_coef)?;
    let sq = tape.mul(p, p)?;
    let neg = tape.mul(sq, nll_neg)?;
    let neg = tape.mul(neg, neg_coef)?;
    let all = tape.add(pos, neg)?;
    tape.sum_all(all)
}

/// Hungarian matching of one layer's predictions to `gt`; returns
/// `(query, gt)` pairs ordered by ground-truth index.
pub fn match_layer<T: Real>(
    tape: &Tape<T>,
    trace: &LayerTrace,
    gt: &[Box3D],
    cfg: &LossConfig,
    model: &ModelConfig,
) -> Result<Vec<(usize, usize)>> {
    let pv = tape.value(trace.box_params).data();
    let targets: Vec<[f64; BOX_PARAMS]> = gt
        .iter()
        .map(|g| box_to_params(g, model.center_scale, model.velocity_scale))
        .collect();
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .zip(gt)
        .map(|(t, g)| {
            (0..trace.scores.len())
                .map(|i| {
                    let l1: f64 = (0..BOX_PARAMS)
                        .map(|d| cfg.box_weights[d] * (pv[i * BOX_PARAMS + d].to_f64_lossy() - t[d]).abs())
                        .sum();
                    cfg.cost_class * (1.0 - trace.scores[i][g.class_id]) + cfg.cost_box * l1
                })
                .collect()
        })
        .collect();
    Ok(hungarian(&cost)?
        .into_iter()
        .enumerate()
        .filter_map(|(j, i)| i.map(|i| (i, j)))
        .collect())
}

fn weighted_abs_sum<T: Real>(tape: &mut Tape<T>, x: Var, target: Tensor<T>, weights: Option<Tensor<T>>) -> Result<Var> {
    let t = tape.constant(target);
    let d = tape.sub(x, t)?;
    let a = tape.abs(d);
    let a = match weights {
        Some(w) => {
            let w = tape.constant(w);
            tape.mul(a, w)?
        }
        None => a,
    };
    tape.sum_all(a)
}

/// Matching and detached uncertainty targets of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTargets {
    /// `(query, gt)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Distance between each pair's regressed center and its ground truth.
    pub dist_cam: Vec<f64>,
    pub dist_lid: Vec<f64>,
}

/// Matches every layer and computes the distance targets from the current
/// center regressions. The result is treated as constant by the loss.
pub fn loss_targets<T: Real>(
    tape: &Tape<T>,
    traces: &[LayerTrace],
    gt: &[Box3D],
    cfg: &LossConfig,
    model: &ModelConfig,
) -> Result<Vec<LayerTargets>> {
    traces
        .iter()
        .map(|trace| {
            let pairs = match_layer(tape, trace, gt, cfg, model)?;
            let dist = |reg: Var| -> Vec<f64> {
                let rv = tape.value(reg).data();
                pairs
                    .iter()
                    .map(|&(i, j)| {
                        let c = trace.input_boxes[i].center;
                        let xy = [c[0] + rv[2 * i].to_f64_lossy(), c[1] + rv[2 * i + 1].to_f64_lossy()];
                        oracle_distance(xy, [gt[j].center[0], gt[j].center[1]])
                    })
                    .collect()
            };
            Ok(LayerTargets {
                dist_cam: dist(trace.reg_cam),
                dist_lid: dist(trace.reg_lid),
                pairs,
            })
        })
        .collect()
}

/// Deep-supervised set loss over all layers.
pub fn compute_loss<T: Real>(
    tape: &mut Tape<T>,
    traces: &[LayerTrace],
    gt: &[Box3D],
    cfg: &LossConfig,
    model: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let targets = loss_targets(tape, traces, gt, cfg, model)?;
    compute_loss_with_targets(tape, traces, gt, &targets, cfg, model)
}

/// Set loss for fixed matchings and distance targets: focal classification,
/// weighted L1 on matched box parameters, `|f_dist - D|` and the L1 center
/// regression, each divided by the number of ground-truth boxes.
pub fn compute_loss_with_targets<T: Real>(
    tape: &mut Tape<T>,
    traces: &[LayerTrace],
    gt: &[Box3D],
    targets: &[LayerTargets],
    cfg: &LossConfig,
    model: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    if targets.len() != traces.len() {
        return Err(crate::error::Error::shape(format!(
            "{} target sets for {} layers",
            targets.len(),
            traces.len()
        )));
    }
    let norm = T::lit(1.0 / gt.len().max(1) as f64);
    let mut total: Option<Var> = None;
    let mut parts = LossBreakdown::default();
    let box_targets: Vec<[f64; BOX_PARAMS]> = gt
        .iter()
        .map(|g| box_to_params(g, model.center_scale, model.velocity_scale))
        .collect();
    for (trace, lt) in traces.iter().zip(targets) {
        let n = trace.scores.len();
        let pairs = &lt.pairs;
        let mut labels = Tensor::zeros(&[n, NUM_CLASSES]);
        for &(i, j) in pairs {
            labels.data_mut()[i * NUM_CLASSES + gt[j].class_id] = T::one();
        }
        let cls = focal_loss(tape, trace.logits, &labels, cfg.focal_alpha)?;
        let cls = tape.scale(cls, norm * T::lit(cfg.weight_class))?;
        parts.classification += tape.value(cls).item().to_f64_lossy();
        let mut terms = vec![cls];
        if !pairs.is_empty() {
            let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p = pairs.len();
            let b = tape.gather(trace.box_params, &rows)?;
            let target = Tensor::from_fn(&[p, BOX_PARAMS], |k| {
                T::lit(box_targets[pairs[k / BOX_PARAMS].1][k % BOX_PARAMS])
            });
            let w = Tensor::from_fn(&[BOX_PARAMS], |d| T::lit(cfg.box_weights[d]));
            let l = weighted_abs_sum(tape, b, target, Some(w))?;
            let l = tape.scale(l, norm * T::lit(cfg.weight_box))?;
            parts.box_l1 += tape.value(l).item().to_f64_lossy();
            terms.push(l);

            for (dist, reg, oracle) in [
                (trace.dist_cam, trace.reg_cam, &lt.dist_cam),
                (trace.dist_lid, trace.reg_lid, &lt.dist_lid),
            ] {
                let d = tape.gather(dist, &rows)?;
                let u = weighted_abs_sum(tape, d, Tensor::from_fn(&[p, 1], |k| T::lit(oracle[k])), None)?;
                let u = tape.scale(u, norm * T::lit(cfg.weight_uncertainty))?;
                parts.uncertainty += tape.value(u).item().to_f64_lossy();
                terms.push(u);

                let r = tape.gather(reg, &rows)?;
                let target = Tensor::from_fn(&[p, 2], |k| {
                    let (i, j) = pairs[k / 2];
                    T::lit(gt[j].center[k % 2] - trace.input_boxes[i].center[k % 2])
                });
                let r = weighted_abs_sum(tape, r, target, None)?;
                let r = tape.scale(r, norm * T::lit(cfg.weight_regression))?;
                parts.regression += tape.value(r).item().to_f64_lossy();
                terms.push(r);
            }
        }
        for t in terms {
            total = Some(match total {
                Some(a) => tape.add(a, t)?,
                None => t,
            });
        }
    }
    let total = total.ok_or(crate::error::Error::Empty("decoder layers"))?;
    parts.total = tape.value(total).item().to_f64_lossy();
    Ok((total, parts))
}
