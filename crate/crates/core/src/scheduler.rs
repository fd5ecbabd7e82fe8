//! Inference planning for videos of any length.
//!
//! A plan splits the frame indices `0..n` into snippets that are run through
//! the model one at a time and scattered back into frame order. The strided
//! strategies interleave frames with a fixed stride so every snippet spans
//! the whole clip; `strided_kf` additionally shares one keyframe set across
//! all snippets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KeyframeCache, Model};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Batched,
    Overlap,
    Strided,
    StridedKf,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Batched,
        Strategy::Overlap,
        Strategy::Strided,
        Strategy::StridedKf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Batched => "batched",
            Strategy::Overlap => "overlap",
            Strategy::Strided => "strided",
            Strategy::StridedKf => "strided_kf",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// `round(j·(n−1)/(m−1))`, always including the first and last frame.
    Uniform,
    /// First and last frame plus `m−2` interior frames at bin centres.
    FirstLastUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframePolicy {
    pub count: usize,
    pub selection: Selection,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            count: 4,
            selection: Selection::Uniform,
        }
    }
}

impl KeyframePolicy {
    /// Strictly increasing keyframe indices in `0..n`; `count` is capped at `n`.
    pub fn select(&self, n: usize) -> Result<Vec<usize>> {
        if self.count == 0 {
            return Err(Error::config("keyframe count must be at least 1"));
        }
        if n == 0 {
            return Err(Error::config("cannot select keyframes from an empty video"));
        }
        let m = self.count.min(n);
        let last = (n - 1) as f64;
        let idx = match (self.selection, m) {
            (_, 1) => vec![(last / 2.0).round() as usize],
            (Selection::Uniform, _) => (0..m)
                .map(|j| (j as f64 * last / (m - 1) as f64).round() as usize)
                .collect(),
            (Selection::FirstLastUniform, 2) => vec![0, n - 1],
            (Selection::FirstLastUniform, _) => {
                let inner = m - 2;
                let span = (n - 2) as f64;
                let mut v = vec![0];
                v.extend((0..inner).map(|j| 1 + ((j as f64 + 0.5) * span / inner as f64).floor() as usize));
                v.push(n - 1);
                v
            }
        };
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        Ok(idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub strategy: Strategy,
    pub snippet_len: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default)]
    pub keyframes: KeyframePolicy,
}

fn default_overlap() -> usize {
    2
}

impl PlanConfig {
    pub fn new(strategy: Strategy, snippet_len: usize) -> Self {
        PlanConfig {
            strategy,
            snippet_len,
            overlap: default_overlap(),
            keyframes: KeyframePolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub strategy: Strategy,
    pub frames: usize,
    pub snippet_len: usize,
    pub overlap: usize,
    /// Frame indices of each snippet; position `j` of snippet `i` writes frame `snippets[i][j]`.
    pub snippets: Vec<Vec<usize>>,
    pub keyframes: Vec<usize>,
    pub cost: usize,
}

/// Stride between consecutive frames of a strided snippet.
pub fn stride(n: usize, snippet_len: usize) -> usize {
    (n / snippet_len).max(1)
}

pub fn plan(cfg: &PlanConfig, n: usize) -> Result<InferencePlan> {
    let l = cfg.snippet_len;
    if n == 0 || l == 0 {
        return Err(Error::config(format!(
            "video length {n} and snippet length {l} must both be at least 1"
        )));
    }
    let mut overlap = 0;
    let snippets: Vec<Vec<usize>> = match cfg.strategy {
        Strategy::Batched => (0..n).step_by(l).map(|s| (s..(s + l).min(n)).collect()).collect(),
        Strategy::Overlap => {
            if cfg.overlap >= l {
                return Err(Error::config(format!(
                    "overlap {} must be smaller than the snippet length {l}",
                    cfg.overlap
                )));
            }
            overlap = cfg.overlap;
            let step = l - overlap;
            let mut out = Vec::new();
            let mut start = 0;
            loop {
                let end = (start + l).min(n);
                out.push((start..end).collect());
                if end == n {
                    break;
                }
                start += step;
            }
            out
        }
        Strategy::Strided | Strategy::StridedKf => {
            // frames past s·l go to the snippet of their residue, so each
            // snippet keeps a constant stride
            let s = stride(n, l);
            (0..s).map(|i| (i..n).step_by(s).collect()).collect()
        }
    };
    let keyframes = match cfg.strategy {
        Strategy::StridedKf => cfg.keyframes.select(n)?,
        _ => vec![],
    };
    let cost = snippets.iter().map(Vec::len).sum::<usize>() + keyframes.len();
    Ok(InferencePlan {
        strategy: cfg.strategy,
        frames: n,
        snippet_len: l,
        overlap,
        snippets,
        keyframes,
        cost,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub strategy: Strategy,
    pub frames: usize,
    pub snippets: usize,
    pub frame_evaluations: usize,
    pub keyframe_encodes: usize,
    pub duplicated_frames: usize,
}

pub fn account(plan: &InferencePlan) -> CostReport {
    let evals: usize = plan.snippets.iter().map(Vec::len).sum();
    CostReport {
        strategy: plan.strategy,
        frames: plan.frames,
        snippets: plan.snippets.len(),
        frame_evaluations: evals,
        keyframe_encodes: plan.keyframes.len(),
        duplicated_frames: evals - plan.frames,
    }
}

impl InferencePlan {
    /// Checks coverage and index ranges; used on plans read from JSON.
    pub fn validate(&self) -> Result<()> {
        if self.snippets.iter().any(Vec::is_empty) {
            return Err(Error::format("plan contains an empty snippet"));
        }
        let mut seen = vec![0usize; self.frames];
        for &f in self.snippets.iter().flatten() {
            if f >= self.frames {
                return Err(Error::format(format!(
                    "plan references frame {f} of a {}-frame video",
                    self.frames
                )));
            }
            seen[f] += 1;
        }
        if let Some(missing) = seen.iter().position(|&c| c == 0) {
            return Err(Error::format(format!("plan never evaluates frame {missing}")));
        }
        if self.strategy != Strategy::Overlap && seen.iter().any(|&c| c > 1) {
            return Err(Error::format("non-overlap plan evaluates a frame twice"));
        }
        if self.keyframes.iter().any(|&k| k >= self.frames)
            || !self.keyframes.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::format(format!("invalid keyframe indices {:?}", self.keyframes)));
        }
        if self.strategy == Strategy::StridedKf && self.keyframes.is_empty() {
            return Err(Error::format("strided_kf plan without keyframes"));
        }
        Ok(())
    }

    /// Distinct snippets evaluating each frame.
    pub fn evaluations_of(&self, frame: usize) -> Vec<usize> {
        self.snippets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(&frame))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: InferencePlan = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Depth of one snippet, keyed by its index in the plan.
fn run_snippet(plan: &InferencePlan, i: usize, video: &Tensor, model: &Model, cache: Option<&KeyframeCache>) -> Result<Tensor> {
    let frames = video.select0(&plan.snippets[i])?;
    match cache {
        Some(c) => model.forward_with_cache(&frames, c),
        None => {
            // the snippet is its own keyframe set; encode it once
            let fv = model.encode(&frames)?;
            let idx: Vec<usize> = (0..plan.snippets[i].len()).collect();
            let c = model.cache_from_features(&fv, &idx)?;
            model.forward_features(&fv, &c)
        }
    }
}

/// Runs `plan` on `video[n, c, h, w]`, visiting snippets in `order`.
pub fn execute_in_order(plan: &InferencePlan, video: &Tensor, model: &Model, order: &[usize]) -> Result<Tensor> {
    let (cache, [h, w]) = prepare(plan, video, model)?;
    let sorted: BTreeSet<usize> = order.iter().copied().collect();
    if sorted.len() != plan.snippets.len() || order.len() != plan.snippets.len() || sorted.iter().any(|&i| i >= plan.snippets.len()) {
        return Err(Error::config("execution order must be a permutation of the snippets"));
    }
    let mut outs: Vec<Option<Tensor>> = vec![None; plan.snippets.len()];
    for &i in order {
        outs[i] = Some(run_snippet(plan, i, video, model, cache.as_ref())?);
    }
    let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every snippet ran")).collect();
    assemble(plan, &outs, h, w)
}

pub fn execute(plan: &InferencePlan, video: &Tensor, model: &Model) -> Result<Tensor> {
    let order: Vec<usize> = (0..plan.snippets.len()).collect();
    execute_in_order(plan, video, model, &order)
}

/// Like [`execute`] with snippets spread over `workers` threads.
pub fn execute_parallel(plan: &InferencePlan, video: &Tensor, model: &Model, workers: usize) -> Result<Tensor> {
    let (cache, [h, w]) = prepare(plan, video, model)?;
    let workers = workers.clamp(1, plan.snippets.len());
    let n = plan.snippets.len();
    let results: Vec<Result<Vec<(usize, Tensor)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|wk| {
                let cache = cache.as_ref();
                scope.spawn(move || {
                    (wk..n)
                        .step_by(workers)
                        .map(|i| Ok((i, run_snippet(plan, i, video, model, cache)?)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("snippet worker panicked")).collect()
    });
    let mut outs: Vec<Option<Tensor>> = vec![None; n];
    for r in results {
        for (i, t) in r? {
            outs[i] = Some(t);
        }
    }
    let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every snippet ran")).collect();
    assemble(plan, &outs, h, w)
}

fn prepare(plan: &InferencePlan, video: &Tensor, model: &Model) -> Result<(Option<KeyframeCache>, [usize; 2])> {
    let [n, _, h, w] = video.dims4("video")?;
    if n != plan.frames {
        return Err(Error::shape(format!(
            "plan is for {} frames, video has {n}",
            plan.frames
        )));
    }
    plan.validate()?;
    let cache = match plan.strategy {
        Strategy::StridedKf => Some(model.cache_keyframes(video, &plan.keyframes)?),
        _ => None,
    };
    Ok((cache, [h, w]))
}

fn assemble(plan: &InferencePlan, outs: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if plan.strategy == Strategy::Overlap {
        return stitch_overlap(&plan.snippets, outs, plan.frames);
    }
    let hw = h * w;
    let mut data = vec![0.0; plan.frames * hw];
    for (snip, out) in plan.snippets.iter().zip(outs) {
        for (j, &f) in snip.iter().enumerate() {
            data[f * hw..(f + 1) * hw].copy_from_slice(&out.data()[j * hw..(j + 1) * hw]);
        }
    }
    Tensor::new(&[plan.frames, 1, h, w], data)
}

/// Least-squares `(s, t)` with `s·x + t ≈ y`; shift only when `x` is flat.
pub fn fit_affine(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
    }
    if sxx <= 1e-24 * (1.0 + x.iter().map(|v| v * v).sum::<f64>()) {
        return (1.0, my - mx);
    }
    let s = sxy / sxx;
    (s, my - s * mx)
}

/// Merges overlapping window predictions `[len_i, 1, h, w]` into `[n, 1, h, w]`.
///
/// Each window after the first is affinely aligned to the result so far on
/// the frames they share, then crossfaded in linearly across those frames.
pub fn stitch_overlap(windows: &[Vec<usize>], preds: &[Tensor], n: usize) -> Result<Tensor> {
    let first = preds.first().ok_or_else(|| Error::shape("no windows to stitch"))?;
    let [_, _, h, w] = first.dims4("window depth")?;
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    let mut done = vec![false; n];
    for (win, pred) in windows.iter().zip(preds) {
        if pred.shape() != [win.len(), 1, h, w] {
            return Err(Error::shape(format!(
                "window depth {:?} does not match {} frames of {h}x{w}",
                pred.shape(),
                win.len()
            )));
        }
        let shared: Vec<usize> = (0..win.len()).filter(|&j| done[win[j]]).collect();
        let (s, t) = if shared.is_empty() {
            (1.0, 0.0)
        } else {
            let mut x = Vec::with_capacity(shared.len() * hw);
            let mut y = Vec::with_capacity(shared.len() * hw);
            for &j in &shared {
                x.extend_from_slice(&pred.data()[j * hw..(j + 1) * hw]);
                y.extend_from_slice(&out[win[j] * hw..(win[j] + 1) * hw]);
            }
            fit_affine(&x, &y)
        };
        let k = shared.len();
        let mut rank = 0;
        for (j, &f) in win.iter().enumerate() {
            let src = &pred.data()[j * hw..(j + 1) * hw];
            let dst = &mut out[f * hw..(f + 1) * hw];
            if done[f] {
                rank += 1;
                let alpha = rank as f64 / (k + 1) as f64;
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (1.0 - alpha) * *d + alpha * (s * v + t);
                }
            } else {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = s * v + t;
                }
                done[f] = true;
            }
        }
    }
    if let Some(f) = done.iter().position(|d| !d) {
        return Err(Error::shape(format!("frame {f} is not covered by any window")));
    }
    Tensor::new(&[n, 1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(strategy: Strategy, n: usize, l: usize) -> InferencePlan {
        plan(&PlanConfig::new(strategy, l), n).unwrap()
    }

    #[test]
    fn strided_192_by_16() {
        let pl = p(Strategy::Strided, 192, 16);
        assert_eq!(pl.snippets.len(), 12);
        assert_eq!(pl.snippets[0], (0..16).map(|k| 12 * k).collect::<Vec<_>>());
        assert_eq!(pl.cost, 192);
    }

    #[test]
    fn whole_video_single_snippet() {
        for st in Strategy::ALL {
            let pl = p(st, 8, 8);
            assert_eq!(pl.snippets, vec![(0..8).collect::<Vec<_>>()], "{st:?}");
        }
    }

    #[test]
    fn short_video_clamps_stride() {
        let pl = p(Strategy::Strided, 10, 16);
        assert_eq!(pl.snippets, vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn overlap_counts() {
        let pl = p(Strategy::Overlap, 192, 32);
        assert_eq!(pl.snippets.len(), 7);
        assert_eq!(pl.cost, 204);
        let c = account(&pl);
        assert_eq!(c.duplicated_frames, 6 * 2);
        assert_eq!(account(&p(Strategy::Batched, 192, 32)).duplicated_frames, 0);
    }

    #[test]
    fn invalid_overlap() {
        let mut c = PlanConfig::new(Strategy::Overlap, 4);
        c.overlap = 4;
        assert!(matches!(plan(&c, 10), Err(Error::Config(_))));
    }

    #[test]
    fn keyframe_policies() {
        let u = KeyframePolicy::default();
        assert_eq!(u.select(192).unwrap(), vec![0, 64, 127, 191]);
        let one = KeyframePolicy { count: 1, ..u };
        assert_eq!(one.select(9).unwrap(), vec![4]);
        let big = KeyframePolicy { count: 10, ..u };
        assert_eq!(big.select(3).unwrap(), vec![0, 1, 2]);
        let fl = KeyframePolicy {
            count: 4,
            selection: Selection::FirstLastUniform,
        };
        assert_eq!(fl.select(12).unwrap(), vec![0, 3, 8, 11]);
    }

    #[test]
    fn strided_kf_cost_adds_keyframes() {
        let pl = p(Strategy::StridedKf, 192, 16);
        assert_eq!(pl.keyframes, vec![0, 64, 127, 191]);
        assert_eq!(pl.cost, 196);
        assert_eq!(account(&pl).keyframe_encodes, 4);
    }

    #[test]
    fn plan_json_round_trip_and_validation() {
        let pl = p(Strategy::StridedKf, 20, 4);
        let back = InferencePlan::from_json(&pl.to_json().unwrap()).unwrap();
        assert_eq!(back, pl);
        let mut bad = pl.clone();
        bad.snippets[0].pop();
        assert!(InferencePlan::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn affine_fit_flat_input() {
        assert_eq!(fit_affine(&[2.0, 2.0], &[5.0, 7.0]), (1.0, 4.0));
        let (s, t) = fit_affine(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-12 && (t - 1.0).abs() < 1e-12);
    }
}
