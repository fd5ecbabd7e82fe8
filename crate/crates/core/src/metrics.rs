//! Evaluation metrics and rank aggregation across methods.
//!
//! Predictions and ground truth are relative inverse depth `[n, 1, h, w]`.
//! Unless disabled, the prediction is aligned to the ground truth once per
//! sequence before any metric is computed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, Granularity, Target};
use crate::numerics::Tensor;

pub const EPS: f64 = 1e-6;
pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const TC_THRESHOLD: f64 = 0.05;
pub const TMC_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Higher,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSpace {
    InverseDepth,
    Depth,
}

/// One entry of the metric-definition registry.
#[derive(Clone, Copy, Debug)]
pub struct MetricInfo {
    pub name: &'static str,
    pub direction: Direction,
    pub definition: &'static str,
}

pub const REGISTRY: &[MetricInfo] = &[
    MetricInfo {
        name: "absrel",
        direction: Direction::Lower,
        definition: "mean |d - g| / g over valid pixels with g > 0",
    },
    MetricInfo {
        name: "delta1",
        direction: Direction::Higher,
        definition: "100 * fraction of valid pixels with max(d/g, g/d) < 1.25",
    },
    MetricInfo {
        name: "tc",
        direction: Direction::Higher,
        definition: "mean over pairs of the fraction of flow-valid pixels with |warp(d[i+1]) - d[i]| / (|d[i]| + 1e-6) < 0.05",
    },
    MetricInfo {
        name: "opw",
        direction: Direction::Lower,
        definition: "prediction min-max normalised over the clip; mean over pairs of mean |warp(d[i+1]) - d[i]| on flow-valid pixels",
    },
    MetricInfo {
        name: "tcc",
        direction: Direction::Higher,
        definition: "mean over pairs of the Pearson correlation of d[i+1]-d[i] and g[i+1]-g[i] on flow-valid pixels; both constant counts as 1, one constant skips the pair",
    },
    MetricInfo {
        name: "tmc",
        direction: Direction::Higher,
        definition: "mean over pairs of mean min((|warp(d[i+1]) - d[i]| + 1e-6) / (|warp(g[i+1]) - g[i]| + 1e-6), 10) on flow-valid pixels",
    },
    MetricInfo {
        name: "tgm",
        direction: Direction::Lower,
        definition: "temporal gradient matching loss with one alignment per clip",
    },
];

pub fn metric_info(name: &str) -> Option<&'static MetricInfo> {
    REGISTRY.iter().find(|m| m.name == name)
}

/// Per-pair displacement `[n−1, 2, h, w]` (x then y, in pixels) from frame
/// `i` to frame `i+1`, and validity `[n−1, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Tensor,
    pub valid: Tensor,
}

impl FlowField {
    pub fn new(flow: Tensor, valid: Tensor) -> Result<Self> {
        let [p, c, h, w] = flow.dims4("flow")?;
        if c != 2 {
            return Err(Error::shape(format!("flow must have 2 channels, got {c}")));
        }
        if valid.shape() != [p, 1, h, w] {
            return Err(Error::shape(format!(
                "flow validity {:?} does not match flow {:?}",
                valid.shape(),
                flow.shape()
            )));
        }
        if !flow.all_finite() {
            return Err(Error::NonFinite("flow contains non-finite displacements".into()));
        }
        Ok(FlowField { flow, valid })
    }

    pub fn pairs(&self) -> usize {
        self.flow.shape()[0]
    }

    fn check(&self, n: usize, h: usize, w: usize) -> Result<()> {
        if self.flow.shape() != [n.saturating_sub(1), 2, h, w] {
            return Err(Error::shape(format!(
                "flow {:?} does not fit a {n}-frame {h}x{w} clip",
                self.flow.shape()
            )));
        }
        Ok(())
    }

    /// Samples `next[h, w]` at `x + flow_pair(x)`; `None` outside the frame or where flow is invalid.
    pub fn warp(&self, pair: usize, next: &[f64], h: usize, w: usize) -> Vec<Option<f64>> {
        let hw = h * w;
        let fd = self.flow.data();
        let vd = self.valid.data();
        (0..hw)
            .map(|p| {
                if vd[pair * hw + p] == 0.0 {
                    return None;
                }
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                let sx = x + fd[(pair * 2) * hw + p];
                let sy = y + fd[(pair * 2 + 1) * hw + p];
                sample_bilinear(next, h, w, sy, sx)
            })
            .collect()
    }
}

/// Bilinear sample at `(y, x)`; `None` when outside `[0, h−1] × [0, w−1]`.
pub fn sample_bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> Option<f64> {
    const SLACK: f64 = 1e-9;
    if !(y >= -SLACK && x >= -SLACK && y <= (h - 1) as f64 + SLACK && x <= (w - 1) as f64 + SLACK) {
        return None;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[yy * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    /// `None` evaluates the raw prediction.
    pub alignment: Option<Granularity>,
    pub space: EvalSpace,
    pub tau: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            alignment: Some(Granularity::PerSequence),
            space: EvalSpace::InverseDepth,
            tau: 0.05,
        }
    }
}

/// Prediction aligned per the options, with the fitted parameters.
pub struct Prepared {
    pub pred: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn prepare(pred: &Tensor, target: &Target, alignment: Option<Granularity>) -> Result<Prepared> {
    if pred.shape() != target.gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} does not match ground truth {:?}",
            pred.shape(),
            target.gt.shape()
        )));
    }
    match alignment {
        None => Ok(Prepared {
            pred: pred.clone(),
            scale: vec![],
            shift: vec![],
        }),
        Some(g) => {
            let a = losses::align_lsq(pred, target, g)?;
            Ok(Prepared {
                pred: a.d_hat,
                scale: a.scale,
                shift: a.shift,
            })
        }
    }
}

/// Pixel pairs `(prediction, truth)` in the evaluation space, plus the
/// count of valid pixels excluded for a nonpositive value.
fn eval_pairs(pred: &Tensor, target: &Target, space: EvalSpace) -> (Vec<(f64, f64)>, usize) {
    let mut out = Vec::new();
    let mut excluded = 0;
    for ((&d, &g), &m) in pred.data().iter().zip(target.gt.data()).zip(target.mask.data()) {
        if m == 0.0 {
            continue;
        }
        match space {
            EvalSpace::InverseDepth if g > 0.0 => out.push((d, g)),
            EvalSpace::Depth if g > 0.0 && d > 0.0 => out.push((1.0 / d, 1.0 / g)),
            _ => excluded += 1,
        }
    }
    (out, excluded)
}

/// Mean absolute relative error on already prepared values.
pub fn absrel(pred: &Tensor, target: &Target, space: EvalSpace) -> Result<(f64, usize)> {
    let (pairs, excluded) = eval_pairs(pred, target, space);
    if pairs.is_empty() {
        return Err(Error::Degenerate("no valid pixels with positive ground truth".into()));
    }
    let s: f64 = pairs.iter().map(|(d, g)| (d - g).abs() / g).sum();
    Ok((s / pairs.len() as f64, excluded))
}

/// Percentage of valid pixels within a factor 1.25 of the truth.
pub fn delta1(pred: &Tensor, target: &Target, space: EvalSpace) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((&d, &g), &m) in pred.data().iter().zip(target.gt.data()).zip(target.mask.data()) {
        if m == 0.0 || g <= 0.0 {
            continue;
        }
        total += 1;
        let (d, g) = match space {
            EvalSpace::InverseDepth => (d, g),
            EvalSpace::Depth => (1.0 / d, 1.0 / g),
        };
        if d > 0.0 && (d / g).max(g / d) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Degenerate("no valid pixels with positive ground truth".into()));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

pub fn tgm_metric(pred: &Tensor, target: &Target, frames: &Tensor, tau: f64) -> Result<f64> {
    losses::tgm_loss(pred, target, frames, tau)
}

/// Mean over pairs with at least one usable pixel, and the number of skipped pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMean {
    pub value: Option<f64>,
    pub skipped: usize,
}

fn pair_mean(values: impl IntoIterator<Item = Option<f64>>) -> PairMean {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0;
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    PairMean {
        value: (n > 0).then(|| sum / n as f64),
        skipped,
    }
}

fn frame(t: &Tensor, i: usize) -> &[f64] {
    let hw = t.shape()[2] * t.shape()[3];
    &t.data()[i * hw..(i + 1) * hw]
}

fn dims(pred: &Tensor, flow: &FlowField) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = pred.dims4("prediction")?;
    if c != 1 {
        return Err(Error::shape(format!("prediction must have 1 channel, got {c}")));
    }
    if n < 2 {
        return Err(Error::shape("temporal metrics need at least 2 frames"));
    }
    flow.check(n, h, w)?;
    Ok((n, h, w))
}

/// Flow-warping error of the clip-normalised prediction.
pub fn opw(pred: &Tensor, flow: &FlowField) -> Result<PairMean> {
    let (n, h, w) = dims(pred, flow)?;
    let d = pred.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = if hi > lo {
        pred.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(pred.shape())
    };
    Ok(pair_mean((0..n - 1).map(|i| {
        let cur = frame(&norm, i);
        let warped = flow.warp(i, frame(&norm, i + 1), h, w);
        mean_some(warped.iter().zip(cur).map(|(wv, &c)| wv.map(|wv| (wv - c).abs())))
    })))
}

/// Fraction of flow-valid pixels whose warped relative change is below the threshold.
pub fn tc(pred: &Tensor, flow: &FlowField) -> Result<PairMean> {
    let (n, h, w) = dims(pred, flow)?;
    Ok(pair_mean((0..n - 1).map(|i| {
        let cur = frame(pred, i);
        let warped = flow.warp(i, frame(pred, i + 1), h, w);
        mean_some(warped.iter().zip(cur).map(|(wv, &c)| {
            wv.map(|wv| if (wv - c).abs() / (c.abs() + EPS) < TC_THRESHOLD { 1.0 } else { 0.0 })
        }))
    })))
}

fn pair_valid(flow: &FlowField, target: &Target, i: usize, hw: usize) -> Vec<bool> {
    let v = flow.valid.data();
    let m = target.mask.data();
    (0..hw)
        .map(|p| v[i * hw + p] != 0.0 && m[i * hw + p] != 0.0 && m[(i + 1) * hw + p] != 0.0)
        .collect()
}

/// Pearson correlation of per-pixel temporal differences of prediction and truth.
pub fn tcc(pred: &Tensor, target: &Target, flow: &FlowField) -> Result<PairMean> {
    let (n, h, w) = dims(pred, flow)?;
    let hw = h * w;
    Ok(pair_mean((0..n - 1).map(|i| {
        let ok = pair_valid(flow, target, i, hw);
        let (p0, p1) = (frame(pred, i), frame(pred, i + 1));
        let (g0, g1) = (frame(&target.gt, i), frame(&target.gt, i + 1));
        let mut a = Vec::new();
        let mut b = Vec::new();
        for p in (0..hw).filter(|&p| ok[p]) {
            a.push(p1[p] - p0[p]);
            b.push(g1[p] - g0[p]);
        }
        pearson(&a, &b)
    })))
}

/// Pearson correlation with the degenerate-case convention of [`tcc`].
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let flat = |s: f64, v: &[f64]| s <= 1e-24 * (1.0 + v.iter().map(|x| x * x).sum::<f64>());
    match (flat(saa, a), flat(sbb, b)) {
        (true, true) => Some(1.0),
        (false, false) => Some(sab / (saa.sqrt() * sbb.sqrt())),
        _ => None,
    }
}

/// Clamped ratio of warped temporal change magnitudes, prediction over truth.
pub fn tmc(pred: &Tensor, target: &Target, flow: &FlowField) -> Result<PairMean> {
    let (n, h, w) = dims(pred, flow)?;
    let hw = h * w;
    Ok(pair_mean((0..n - 1).map(|i| {
        let ok = pair_valid(flow, target, i, hw);
        let wp = flow.warp(i, frame(pred, i + 1), h, w);
        let wg = flow.warp(i, frame(&target.gt, i + 1), h, w);
        let (p0, g0) = (frame(pred, i), frame(&target.gt, i));
        mean_some((0..hw).map(|p| {
            if !ok[p] {
                return None;
            }
            let dp = (wp[p]? - p0[p]).abs();
            let dg = (wg[p]? - g0[p]).abs();
            Some(((dp + EPS) / (dg + EPS)).min(TMC_CLAMP))
        }))
    })))
}

fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: Option<f64>,
    pub direction: Direction,
    /// Why the value is missing or partial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentInfo {
    pub granularity: Option<Granularity>,
    pub space: EvalSpace,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub metrics: BTreeMap<String, MetricValue>,
    pub alignment: AlignmentInfo,
    pub excluded_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<f64>,
}

impl EvalReport {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(|m| m.value)
    }

    /// Report with given metric values only (for ranking external results).
    pub fn from_values(method: &str, values: &[(&str, f64)]) -> Result<Self> {
        let mut metrics = BTreeMap::new();
        for &(name, v) in values {
            let info = metric_info(name).ok_or_else(|| Error::config(format!("unknown metric {name}")))?;
            metrics.insert(
                name.to_string(),
                MetricValue {
                    value: Some(v),
                    direction: info.direction,
                    note: None,
                },
            );
        }
        Ok(EvalReport {
            method: method.to_string(),
            metrics,
            alignment: AlignmentInfo {
                granularity: None,
                space: EvalSpace::InverseDepth,
                scale: vec![],
                shift: vec![],
            },
            excluded_pixels: 0,
            rank: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn entry(name: &str, value: Option<f64>, note: Option<String>) -> (String, MetricValue) {
    let info = metric_info(name).expect("registered metric");
    (
        name.to_string(),
        MetricValue {
            value,
            direction: info.direction,
            note,
        },
    )
}

fn pair_entry(name: &str, r: PairMean) -> (String, MetricValue) {
    let note = (r.skipped > 0).then(|| format!("{} frame pairs skipped", r.skipped));
    entry(name, r.value, note)
}

/// Full metric battery for one clip.
///
/// `frames` (pixels in `[0, 1]`) feed the TGM mask; `flow` feeds OPW, TC,
/// TCC and TMC. Metrics whose input is missing are reported without a value
/// and a note saying why.
pub fn evaluate(
    method: &str,
    pred: &Tensor,
    target: &Target,
    frames: Option<&Tensor>,
    flow: Option<&FlowField>,
    opts: &MetricOptions,
) -> Result<EvalReport> {
    let prep = prepare(pred, target, opts.alignment)?;
    let (ar, excluded) = absrel(&prep.pred, target, opts.space)?;
    let mut metrics: BTreeMap<String, MetricValue> = BTreeMap::new();
    metrics.extend([entry("absrel", Some(ar), None)]);
    metrics.extend([entry("delta1", Some(delta1(&prep.pred, target, opts.space)?), None)]);
    if target.frames() >= 2 {
        metrics.extend([match frames {
            Some(frames) => entry("tgm", Some(tgm_metric(pred, target, frames, opts.tau)?), None),
            None => entry("tgm", None, Some("skipped: no input frames".into())),
        }]);
        match flow {
            Some(flow) => {
                metrics.extend([pair_entry("opw", opw(&prep.pred, flow)?)]);
                metrics.extend([pair_entry("tc", tc(&prep.pred, flow)?)]);
                metrics.extend([pair_entry("tcc", tcc(&prep.pred, target, flow)?)]);
                metrics.extend([pair_entry("tmc", tmc(&prep.pred, target, flow)?)]);
            }
            None => {
                for name in ["opw", "tc", "tcc", "tmc"] {
                    metrics.extend([entry(name, None, Some("skipped: no optical flow".into()))]);
                }
            }
        }
    } else {
        for name in ["tgm", "opw", "tc", "tcc", "tmc"] {
            metrics.extend([entry(name, None, Some("single frame".into()))]);
        }
    }
    Ok(EvalReport {
        method: method.to_string(),
        metrics,
        alignment: AlignmentInfo {
            granularity: opts.alignment,
            space: opts.space,
            scale: prep.scale,
            shift: prep.shift,
        },
        excluded_pixels: excluded,
        rank: None,
    })
}

/// Ranks of `values` (1 = best); equal values share the mean of their ranks.
pub fn rank_column(values: &[f64], direction: Direction) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match direction {
        Direction::Lower => values[a].total_cmp(&values[b]),
        Direction::Higher => values[b].total_cmp(&values[a]),
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Average rank of each method over every metric all reports have a value for.
pub fn rank_methods(reports: &[EvalReport]) -> Result<Vec<f64>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::config("no reports to rank"))?;
    let names: Vec<&String> = first
        .metrics
        .iter()
        .filter(|(k, v)| v.value.is_some() && reports.iter().all(|r| r.value(k).is_some()))
        .map(|(k, _)| k)
        .collect();
    if names.is_empty() {
        return Err(Error::config("reports share no metric with a value"));
    }
    let mut sum = vec![0.0; reports.len()];
    for name in &names {
        let dir = first.metrics[*name].direction;
        if reports.iter().any(|r| r.metrics[*name].direction != dir) {
            return Err(Error::config(format!("reports disagree on the direction of {name}")));
        }
        let vals: Vec<f64> = reports.iter().map(|r| r.value(name).unwrap()).collect();
        for (s, r) in sum.iter_mut().zip(rank_column(&vals, dir)) {
            *s += r;
        }
    }
    Ok(sum.into_iter().map(|s| s / names.len() as f64).collect())
}
