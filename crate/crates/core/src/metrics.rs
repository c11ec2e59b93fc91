//! Detection metrics in the nuScenes style (centre-distance AP, true
//! positive errors, NDS) and the composite training loss.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::detector::Box3D;
use crate::error::{invalid, Result};
use crate::scenesim::ObjectClass;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub dist_thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub recall_points: usize,
    pub min_recall: f64,
    pub min_precision: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dist_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            recall_points: 101,
            min_recall: 0.1,
            min_precision: 0.1,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.dist_thresholds;
        if t.is_empty() || t.iter().any(|d| !(*d > 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("dist_thresholds must be positive and strictly ascending");
        }
        if !t.contains(&self.tp_threshold) {
            return invalid("tp_threshold must be one of dist_thresholds");
        }
        if self.recall_points < 2 {
            return invalid("recall_points must be at least 2");
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) {
            return invalid("min_recall and min_precision must lie in [0, 1)");
        }
        Ok(())
    }
}

/// BEV centre distance.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction index, gt index, distance)` in matching order.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Prediction indices of `class`, by descending score then ascending index.
fn ranked(preds: &[Box3D], class: ObjectClass) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    idx
}

/// Nearest unmatched GT of the class strictly closer than `d`.
fn nearest_free(p: &Box3D, gts: &[Box3D], class: ObjectClass, taken: &[bool], d: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if gt.class != class || taken[g] {
            continue;
        }
        let dist = center_distance(p, gt);
        if dist < d && best.map_or(true, |(_, bd)| dist < bd) {
            best = Some((g, dist));
        }
    }
    best
}

/// Greedy matching: predictions in descending score order each take the
/// nearest unmatched same-class GT whose centre lies strictly within `d`.
pub fn match_boxes(preds: &[Box3D], gts: &[Box3D], class: ObjectClass, d: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    let mut unmatched_preds = Vec::new();
    for i in ranked(preds, class) {
        match nearest_free(&preds[i], gts, class, &taken, d) {
            Some((g, dist)) => {
                taken[g] = true;
                matches.push((i, g, dist));
            }
            None => unmatched_preds.push(i),
        }
    }
    let unmatched_gts = (0..gts.len()).filter(|&g| gts[g].class == class && !taken[g]).collect();
    MatchResult {
        matches,
        unmatched_preds,
        unmatched_gts,
    }
}

/// One evaluation sample: predictions and ground truth of a scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sample {
    pub preds: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

/// `np.interp(x, xp, fp, right=0)` for non-decreasing `xp`.
pub fn interp_right_zero(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let n = xp.len();
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[n - 1] {
        return 0.0;
    }
    if x == xp[n - 1] {
        return fp[n - 1];
    }
    // last j with xp[j] <= x; j < n - 1 here
    let j = xp.partition_point(|v| *v <= x) - 1;
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    slope * (x - xp[j]) + fp[j]
}

/// True-positive flags of all class predictions across samples, ordered by
/// descending score (ties by sample, then prediction index), plus the GT
/// count. Matching is greedy per sample as in [`match_boxes`].
fn tp_sequence(samples: &[Sample], class: ObjectClass, d: f64) -> (Vec<bool>, usize) {
    let n_gt = samples.iter().map(|s| s.gts.iter().filter(|g| g.class == class).count()).sum();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (pi, p) in s.preds.iter().enumerate() {
            if p.class == class {
                order.push((si, pi));
            }
        }
    }
    order.sort_by(|a, b| {
        let (sa, sb) = (samples[a.0].preds[a.1].score, samples[b.0].preds[b.1].score);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.gts.len()]).collect();
    let flags = order
        .iter()
        .map(|&(si, pi)| {
            let s = &samples[si];
            match nearest_free(&s.preds[pi], &s.gts, class, &taken[si], d) {
                Some((g, _)) => {
                    taken[si][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// Average precision from a score-ordered TP sequence. `None` when there
/// is no ground truth.
pub fn ap_from_sequence(tp: &[bool], n_gt: usize, cfg: &MetricsConfig) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    if tp.is_empty() {
        return Some(0.0);
    }
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    for &t in tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        prec.push(ctp / (ctp + cfp));
        rec.push(ctp / n_gt as f64);
    }
    let n = cfg.recall_points;
    let first = (100.0 * cfg.min_recall).round() as usize + 1;
    // same grid values as np.linspace(0, 1, n)
    let step = 1.0 / (n - 1) as f64;
    let kept: Vec<f64> = (0..n)
        .map(|i| if i == n - 1 { 1.0 } else { i as f64 * step })
        .map(|r| interp_right_zero(r, &rec, &prec))
        .skip(first)
        .map(|p| (p - cfg.min_precision).max(0.0))
        .collect();
    if kept.is_empty() {
        return Some(0.0);
    }
    Some((kept.iter().sum::<f64>() / kept.len() as f64 / (1.0 - cfg.min_precision)).min(1.0))
}

pub fn average_precision(samples: &[Sample], class: ObjectClass, d: f64, cfg: &MetricsConfig) -> Option<f64> {
    let (tp, n_gt) = tp_sequence(samples, class, d);
    ap_from_sequence(&tp, n_gt, cfg)
}

/// Mean over the defined entries of an AP table.
pub fn map_score(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return invalid("AP table has no defined entries");
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean true-positive errors of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 - IoU` of two boxes sharing centre and heading.
pub fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Smallest absolute yaw difference, in `[0, pi]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

pub fn tp_errors(pairs: &[(&Box3D, &Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors::default();
    for (p, g) in pairs {
        e.ate += center_distance(p, g);
        e.ase += scale_error(&p.size, &g.size);
        e.aoe += yaw_error(p.yaw, g.yaw);
        e.ave += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
    }
    e.ate /= n;
    e.ase /= n;
    e.aoe /= n;
    e.ave /= n;
    e
}

/// `(5 mAP + sum(1 - min(1, mTP))) / 10`.
pub fn nds(map: f64, mtp: &[f64; 5]) -> f64 {
    (5.0 * map + mtp.iter().map(|t| 1.0 - t.clamp(0.0, 1.0)).sum::<f64>()) / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `class -> threshold -> AP`; `null` when the class has no GT.
    pub ap: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub tp_errors: BTreeMap<String, Option<TpErrors>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub m_ate: f64,
    #[serde(rename = "mASE")]
    pub m_ase: f64,
    #[serde(rename = "mAOE")]
    pub m_aoe: f64,
    #[serde(rename = "mAVE")]
    pub m_ave: f64,
    #[serde(rename = "mAAE")]
    pub m_aae: f64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    /// Classes without ground truth, left out of every mean.
    pub undefined_classes: Vec<String>,
    pub num_samples: usize,
}

impl MetricsReport {
    pub fn mtp(&self) -> [f64; 5] {
        [self.m_ate, self.m_ase, self.m_aoe, self.m_ave, self.m_aae]
    }
}

fn threshold_key(d: f64) -> String {
    format!("{d}")
}

/// Full evaluation over a set of samples.
pub fn evaluate(samples: &[Sample], cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut ap = BTreeMap::new();
    let mut table = Vec::new();
    let mut tp = BTreeMap::new();
    let mut defined_tp = Vec::new();
    let mut undefined = Vec::new();
    for class in ObjectClass::ALL {
        let mut row = BTreeMap::new();
        for &d in &cfg.dist_thresholds {
            let a = average_precision(samples, class, d, cfg);
            table.push(a);
            row.insert(threshold_key(d), a);
        }
        ap.insert(class.name().to_string(), row);
        let has_gt = samples.iter().any(|s| s.gts.iter().any(|g| g.class == class));
        if !has_gt {
            undefined.push(class.name().to_string());
            tp.insert(class.name().to_string(), None);
            continue;
        }
        let mut pairs = Vec::new();
        for s in samples {
            let m = match_boxes(&s.preds, &s.gts, class, cfg.tp_threshold);
            pairs.extend(m.matches.iter().map(|&(p, g, _)| (&s.preds[p], &s.gts[g])));
        }
        let e = tp_errors(&pairs);
        tp.insert(class.name().to_string(), Some(e));
        defined_tp.push(e);
    }
    let (map, mtp) = if defined_tp.is_empty() {
        (0.0, [1.0; 5])
    } else {
        let n = defined_tp.len() as f64;
        let mut m = [0.0; 5];
        for e in &defined_tp {
            for (a, b) in m.iter_mut().zip(e.as_array()) {
                *a += b / n;
            }
        }
        (map_score(&table)?, m)
    };
    Ok(MetricsReport {
        ap,
        tp_errors: tp,
        map,
        m_ate: mtp[0],
        m_ase: mtp[1],
        m_aoe: mtp[2],
        m_ave: mtp[3],
        m_aae: mtp[4],
        nds: nds(map, &mtp),
        undefined_classes: undefined,
        num_samples: samples.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bbox: f64,
    pub cls: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bbox: 1.0,
            cls: 1.0,
            dir: 1.0,
        }
    }
}

/// Inputs of the composite loss. Box rows are regression vectors of
/// matched prediction/target pairs.
pub struct LossInputs<'a> {
    pub heatmap_pred: &'a Array3<f64>,
    pub heatmap_target: &'a Array3<f64>,
    pub box_pred: &'a [Vec<f64>],
    pub box_target: &'a [Vec<f64>],
    pub dir_logits: &'a [[f64; 2]],
    pub dir_target: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bbox: f64,
    pub cls: f64,
    pub dir: f64,
    pub total: f64,
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Penalty-reduced focal loss over Gaussian targets, normalized by the
/// number of unit-target cells.
pub fn gaussian_focal_loss(pred: &Array3<f64>, target: &Array3<f64>, alpha: f64, beta: f64) -> Result<f64> {
    if pred.dim() != target.dim() {
        return invalid("heatmap prediction and target differ in shape");
    }
    const EPS: f64 = 1e-12;
    let mut pos = 0.0;
    let mut sum = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("heatmap probability {p} outside [0, 1]"));
        }
        let p = p.clamp(EPS, 1.0 - EPS);
        if t == 1.0 {
            pos += 1.0;
            sum -= (1.0 - p).powf(alpha) * p.ln();
        } else {
            sum -= (1.0 - t).powf(beta) * p.powf(alpha) * (1.0 - p).ln();
        }
    }
    Ok(sum / f64::max(pos, 1.0))
}

/// Regression vector `(x, y, z, ln l, ln w, ln h, sin yaw, cos yaw, vx, vy)`.
pub fn box_regression(b: &Box3D) -> Vec<f64> {
    vec![
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Heading direction bin: 1 for yaw in `[0, pi)`, else 0.
pub fn direction_bin(yaw: f64) -> usize {
    usize::from((0.0..PI).contains(&yaw.rem_euclid(2.0 * PI)))
}

pub fn total_loss(inp: &LossInputs<'_>, w: &LossWeights) -> Result<LossBreakdown> {
    if !(w.bbox >= 0.0 && w.cls >= 0.0 && w.dir >= 0.0) {
        return invalid("loss weights must be non-negative");
    }
    if inp.box_pred.len() != inp.box_target.len() || inp.dir_logits.len() != inp.dir_target.len() {
        return invalid("loss inputs have mismatched lengths");
    }
    let mut bbox = 0.0;
    for (p, t) in inp.box_pred.iter().zip(inp.box_target) {
        if p.len() != t.len() {
            return invalid("box regression vectors differ in length");
        }
        bbox += p.iter().zip(t).map(|(a, b)| smooth_l1(a - b, 1.0)).sum::<f64>();
    }
    bbox /= f64::max(inp.box_pred.len() as f64, 1.0);
    let cls = gaussian_focal_loss(inp.heatmap_pred, inp.heatmap_target, 2.0, 4.0)?;
    let mut dir = 0.0;
    for (l, &t) in inp.dir_logits.iter().zip(inp.dir_target) {
        if t > 1 {
            return invalid("direction target must be 0 or 1");
        }
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        dir += lse - l[t];
    }
    dir /= f64::max(inp.dir_logits.len() as f64, 1.0);
    Ok(LossBreakdown {
        bbox,
        cls,
        dir,
        total: w.bbox * bbox + w.cls * cls + w.dir * dir,
    })
}
