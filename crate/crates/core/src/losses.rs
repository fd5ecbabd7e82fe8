//! Scale-shift alignment and the training losses.
//!
//! Depth maps are `[n, 1, h, w]` tensors; masks have the same shape and mark
//! valid pixels with a nonzero value. Every loss is recorded on a [`Tape`] so
//! the trainer can differentiate it; the free functions at the bottom
//! evaluate the same graphs on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerFrame,
    PerSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Image,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssi: f64,
    pub gm: f64,
    pub tgm: f64,
    /// Intensity-change threshold of the temporal mask.
    pub tau: f64,
    pub trim_fraction: f64,
    pub gm_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssi: 2.0,
            gm: 1.0,
            tgm: 2.5,
            tau: 0.05,
            trim_fraction: 0.2,
            gm_scales: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ssi, self.gm, self.tgm].iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau {} must lie in (0, 1)", self.tau)));
        }
        if !(0.0..1.0).contains(&self.trim_fraction) {
            return Err(Error::config(format!(
                "trim_fraction {} must lie in [0, 1)",
                self.trim_fraction
            )));
        }
        if self.gm_scales == 0 {
            return Err(Error::config("gm_scales must be at least 1"));
        }
        Ok(())
    }
}

/// Result of [`align_lsq`]: `d_hat = scale·pred + shift` fitted to `gt`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub d_hat: Tensor,
    pub d_hat_gt: Tensor,
    /// One entry per fitted group (frame or whole sequence).
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub valid_mask: Tensor,
}

/// Ground truth with invalid and non-finite pixels zeroed, plus a 0/1 mask.
#[derive(Clone, Debug)]
pub struct Target {
    pub gt: Tensor,
    pub mask: Tensor,
}

impl Target {
    pub fn new(gt: &Tensor, mask: &Tensor) -> Result<Self> {
        let [_, c, _, _] = gt.dims4("ground truth")?;
        if c != 1 {
            return Err(Error::shape(format!("depth maps must have 1 channel, got {c}")));
        }
        if gt.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "mask {:?} does not match ground truth {:?}",
                mask.shape(),
                gt.shape()
            )));
        }
        let mut g = gt.clone();
        let mut m = mask.clone();
        for (gv, mv) in g.data_mut().iter_mut().zip(m.data_mut()) {
            let valid = *mv != 0.0 && gv.is_finite();
            *mv = if valid { 1.0 } else { 0.0 };
            if !valid {
                *gv = 0.0;
            }
        }
        Ok(Target { gt: g, mask: m })
    }

    /// All pixels valid.
    pub fn dense(gt: &Tensor) -> Result<Self> {
        Self::new(gt, &Tensor::full(gt.shape(), 1.0))
    }

    pub fn frames(&self) -> usize {
        self.gt.shape()[0]
    }
}

/// Graph builders; all take the prediction as a tape variable.
pub mod graph {
    use super::*;

    pub struct Aligned {
        pub d_hat: Var,
        pub scale: Vec<f64>,
        pub shift: Vec<f64>,
    }

    fn check_pred(tape: &Tape, pred: Var, target: &Target) -> Result<()> {
        if tape.shape(pred) != target.gt.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} does not match ground truth {:?}",
                tape.shape(pred),
                target.gt.shape()
            )));
        }
        if let Some(i) = tape.value(pred).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prediction has a non-finite value at flat index {i}")));
        }
        Ok(())
    }

    /// Least-squares `(s, t)` minimising `Σ_valid (s·pred + t − gt)²` per group.
    pub fn align(tape: &mut Tape, pred: Var, target: &Target, gran: Granularity) -> Result<Aligned> {
        check_pred(tape, pred, target)?;
        let shape = target.gt.shape().to_vec();
        let n = shape[0];
        let groups = match gran {
            Granularity::PerFrame => n,
            Granularity::PerSequence => 1,
        };
        let k = target.gt.numel() / groups;
        let pv = tape.value(pred).data();
        let (gd, md) = (target.gt.data(), target.mask.data());

        let mut inv_n = Vec::with_capacity(groups);
        let mut gbar = Vec::with_capacity(groups);
        let mut gc = vec![0.0; groups * k];
        for gi in 0..groups {
            let r = gi * k..(gi + 1) * k;
            let cnt: f64 = md[r.clone()].iter().sum();
            if cnt < 2.0 {
                return Err(Error::Degenerate(format!(
                    "alignment group {gi} has {cnt} valid pixels, need at least 2"
                )));
            }
            let mean = |x: &[f64]| x.iter().zip(&md[r.clone()]).map(|(a, m)| a * m).sum::<f64>() / cnt;
            let gm = mean(&gd[r.clone()]);
            let pm = mean(&pv[r.clone()]);
            let var = |x: &[f64], mu: f64| {
                x.iter().zip(&md[r.clone()]).map(|(a, m)| m * (a - mu).powi(2)).sum::<f64>() / cnt
            };
            let sq = |x: &[f64]| x.iter().zip(&md[r.clone()]).map(|(a, m)| m * a * a).sum::<f64>() / cnt;
            if var(&gd[r.clone()], gm) <= 1e-12 * sq(&gd[r.clone()]) + f64::MIN_POSITIVE {
                return Err(Error::Degenerate(format!(
                    "ground truth is constant over the valid pixels of group {gi}"
                )));
            }
            if var(&pv[r.clone()], pm) <= 1e-12 * sq(&pv[r.clone()]) + f64::MIN_POSITIVE {
                return Err(Error::Degenerate(format!(
                    "prediction is constant over the valid pixels of group {gi}"
                )));
            }
            for j in r {
                gc[j] = (gd[j] - gm) * md[j];
            }
            inv_n.push(1.0 / cnt);
            gbar.push(gm);
        }

        let p2 = tape.reshape(pred, &[groups, k])?;
        let m2 = tape.constant(target.mask.clone().reshape(&[groups, k])?);
        let inv_n = tape.constant(Tensor::new(&[groups, 1], inv_n)?);
        let gbar = tape.constant(Tensor::new(&[groups, 1], gbar)?);
        let gc = tape.constant(Tensor::new(&[groups, k], gc)?);

        let pm = tape.mul(p2, m2)?;
        let sp = tape.sum_axis(pm, 1)?;
        let pbar = tape.mul(sp, inv_n)?;
        let pc = tape.sub(p2, pbar)?;
        let pc = tape.mul(pc, m2)?;
        let cov = tape.mul(pc, gc)?;
        let cov = tape.sum_axis(cov, 1)?;
        let var = tape.square(pc);
        let var = tape.sum_axis(var, 1)?;
        let s = tape.div(cov, var)?;
        let sp = tape.mul(s, pbar)?;
        let t = tape.sub(gbar, sp)?;
        let d = tape.mul(s, p2)?;
        let d = tape.add(d, t)?;
        let d_hat = tape.reshape(d, &shape)?;
        Ok(Aligned {
            d_hat,
            scale: tape.value(s).data().to_vec(),
            shift: tape.value(t).data().to_vec(),
        })
    }

    /// Per-frame trimmed mean absolute residual after per-frame alignment,
    /// averaged over frames.
    pub fn ssi_trim(tape: &mut Tape, pred: Var, target: &Target, trim_fraction: f64) -> Result<Var> {
        let al = align(tape, pred, target, Granularity::PerFrame)?;
        let g = tape.constant(target.gt.clone());
        let r = tape.sub(al.d_hat, g)?;
        let a = tape.abs(r);
        let n = target.frames();
        let k = target.gt.numel() / n;
        let av = tape.value(a).data();
        let md = target.mask.data();
        let mut w = vec![0.0; n * k];
        for f in 0..n {
            let mut idx: Vec<usize> = (f * k..(f + 1) * k).filter(|&j| md[j] != 0.0).collect();
            // stable sort keeps pixel order among equal residuals
            idx.sort_by(|&x, &y| av[x].total_cmp(&av[y]));
            let keep = idx.len() - (trim_fraction * idx.len() as f64).floor() as usize;
            for &j in &idx[..keep] {
                w[j] = 1.0 / (keep as f64 * n as f64);
            }
        }
        let w = tape.constant(Tensor::new(target.gt.shape(), w)?);
        let l = tape.mul(a, w)?;
        Ok(tape.sum(l))
    }

    /// Multi-scale gradient matching on the per-frame aligned residual.
    ///
    /// Scale `k` subsamples the residual and mask with stride `2^k`; each
    /// scale contributes `(Σ|∂x R| + Σ|∂y R|) / Σ mask` over pixel pairs
    /// whose both ends are valid.
    pub fn gradient_matching(tape: &mut Tape, pred: Var, target: &Target, scales: usize) -> Result<Var> {
        let al = align(tape, pred, target, Granularity::PerFrame)?;
        let g = tape.constant(target.gt.clone());
        let r = tape.sub(al.d_hat, g)?;
        let [_, _, h, w] = target.gt.dims4("ground truth")?;
        let mut total: Option<Var> = None;
        for k in 0..scales {
            let step = 1 << k;
            let rows: Vec<usize> = (0..h).step_by(step).collect();
            let cols: Vec<usize> = (0..w).step_by(step).collect();
            let rk = tape.select(r, 2, &rows)?;
            let rk = tape.select(rk, 3, &cols)?;
            let mk = target.mask.select_axis(2, &rows)?.select_axis(3, &cols)?;
            let count = mk.sum();
            if count == 0.0 {
                continue;
            }
            for axis in [3, 2] {
                let len = mk.shape()[axis];
                if len < 2 {
                    continue;
                }
                let hi: Vec<usize> = (1..len).collect();
                let lo: Vec<usize> = (0..len - 1).collect();
                let a = tape.select(rk, axis, &hi)?;
                let b = tape.select(rk, axis, &lo)?;
                let d = tape.sub(a, b)?;
                let d = tape.abs(d);
                let pm = mk.select_axis(axis, &hi)?;
                let qm = mk.select_axis(axis, &lo)?;
                let wts = Tensor::new(
                    pm.shape(),
                    pm.data().iter().zip(qm.data()).map(|(x, y)| x * y / count).collect(),
                )?;
                let wv = tape.constant(wts);
                let term = tape.mul(d, wv)?;
                let term = tape.sum(term);
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
        }
        Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
    }

    /// Temporal gradient matching after one alignment for the whole clip.
    pub fn tgm(tape: &mut Tape, pred: Var, target: &Target, frames: &Tensor, tau: f64) -> Result<Var> {
        let (w, _) = pair_weights(target, frames, tau)?;
        let al = align(tape, pred, target, Granularity::PerSequence)?;
        let g = tape.constant(target.gt.clone());
        tgm_core(tape, al.d_hat, g, &w)
    }

    /// `Σ_i Σ_px w[i]·| |d_{i+1} − d_i| − |g_{i+1} − g_i| |` on already aligned maps.
    pub fn tgm_core(tape: &mut Tape, d_hat: Var, d_hat_gt: Var, pair_weights: &Tensor) -> Result<Var> {
        let n = tape.shape(d_hat)[0];
        if n < 2 {
            return Err(Error::shape(format!("temporal loss needs at least 2 frames, got {n}")));
        }
        let hi: Vec<usize> = (1..n).collect();
        let lo: Vec<usize> = (0..n - 1).collect();
        let mut abs_diff = |x: Var| -> Result<Var> {
            let a = tape.select(x, 0, &hi)?;
            let b = tape.select(x, 0, &lo)?;
            let d = tape.sub(a, b)?;
            Ok(tape.abs(d))
        };
        let dp = abs_diff(d_hat)?;
        let dg = abs_diff(d_hat_gt)?;
        let e = tape.sub(dp, dg)?;
        let e = tape.abs(e);
        let w = tape.constant(pair_weights.clone());
        let l = tape.mul(e, w)?;
        Ok(tape.sum(l))
    }

    /// Per-pair loss terms for the whole clip.
    pub struct Terms {
        pub ssi: Var,
        pub gm: Var,
        pub tgm: Option<Var>,
        pub total: Var,
    }

    pub fn combined(
        tape: &mut Tape,
        pred: Var,
        target: &Target,
        frames: &Tensor,
        weights: &LossWeights,
        mode: LossMode,
    ) -> Result<Terms> {
        weights.validate()?;
        let ssi = ssi_trim(tape, pred, target, weights.trim_fraction)?;
        let gm = gradient_matching(tape, pred, target, weights.gm_scales)?;
        let a = tape.mul_const(ssi, weights.ssi);
        let b = tape.mul_const(gm, weights.gm);
        let mut total = tape.add(a, b)?;
        let tgm_term = match mode {
            LossMode::Image => None,
            LossMode::Video => {
                let t = tgm(tape, pred, target, frames, weights.tau)?;
                let c = tape.mul_const(t, weights.tgm);
                total = tape.add(total, c)?;
                Some(t)
            }
        };
        Ok(Terms {
            ssi,
            gm,
            tgm: tgm_term,
            total,
        })
    }
}

/// Per-pixel temporal weights `[n−1, 1, h, w]` for the TGM sum.
///
/// A pixel of pair `i` counts when it is valid in both frames and its
/// channel-mean intensity changes by less than `tau`. Each pair's weights sum
/// to `1/(n−1)`; pairs with no counted pixel get zero weight. Also returns the
/// number of such empty pairs.
pub fn pair_weights(target: &Target, frames: &Tensor, tau: f64) -> Result<(Tensor, usize)> {
    let [n, _, h, w] = target.gt.dims4("ground truth")?;
    let [fn_, c, fh, fw] = frames.dims4("frames")?;
    if (fn_, fh, fw) != (n, h, w) {
        return Err(Error::shape(format!(
            "frames {:?} do not match depth {:?}",
            frames.shape(),
            target.gt.shape()
        )));
    }
    if n < 2 {
        return Err(Error::shape(format!("temporal loss needs at least 2 frames, got {n}")));
    }
    let hw = h * w;
    let fd = frames.data();
    let intensity: Vec<f64> = (0..n * hw)
        .map(|j| {
            let (f, p) = (j / hw, j % hw);
            (0..c).map(|ch| fd[(f * c + ch) * hw + p]).sum::<f64>() / c as f64
        })
        .collect();
    let md = target.mask.data();
    let mut out = vec![0.0; (n - 1) * hw];
    let mut empty = 0;
    for i in 0..n - 1 {
        let sel: Vec<usize> = (0..hw)
            .filter(|&p| {
                let (a, b) = (i * hw + p, (i + 1) * hw + p);
                md[a] != 0.0 && md[b] != 0.0 && (intensity[b] - intensity[a]).abs() < tau
            })
            .collect();
        if sel.is_empty() {
            log::debug!("temporal pair {i} has no pixel under the intensity threshold");
            empty += 1;
            continue;
        }
        let wv = 1.0 / (sel.len() as f64 * (n - 1) as f64);
        for p in sel {
            out[i * hw + p] = wv;
        }
    }
    Ok((Tensor::new(&[n - 1, 1, h, w], out)?, empty))
}

fn eval<F>(pred: &Tensor, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = f(&mut tape, p)?;
    let v = tape.value(l).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

pub fn align_lsq(pred: &Tensor, target: &Target, gran: Granularity) -> Result<AlignedPair> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let al = graph::align(&mut tape, p, target, gran)?;
    Ok(AlignedPair {
        d_hat: tape.value(al.d_hat).clone(),
        d_hat_gt: target.gt.clone(),
        scale: al.scale,
        shift: al.shift,
        valid_mask: target.mask.clone(),
    })
}

pub fn ssi_trim_loss(pred: &Tensor, target: &Target, trim_fraction: f64) -> Result<f64> {
    eval(pred, |t, p| graph::ssi_trim(t, p, target, trim_fraction))
}

pub fn gradient_matching_loss(pred: &Tensor, target: &Target, scales: usize) -> Result<f64> {
    eval(pred, |t, p| graph::gradient_matching(t, p, target, scales))
}

pub fn tgm_loss(pred: &Tensor, target: &Target, frames: &Tensor, tau: f64) -> Result<f64> {
    eval(pred, |t, p| graph::tgm(t, p, target, frames, tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ssi: f64,
    pub gm: f64,
    pub tgm: Option<f64>,
    pub total: f64,
}

pub fn combined_loss(
    pred: &Tensor,
    target: &Target,
    frames: &Tensor,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = graph::combined(&mut tape, p, target, frames, weights, mode)?;
    let v = LossValues {
        ssi: tape.value(t.ssi).item(),
        gm: tape.value(t.gm).item(),
        tgm: t.tgm.map(|x| tape.value(x).item()),
        total: tape.value(t.total).item(),
    };
    if !v.total.is_finite() {
        return Err(Error::NonFinite(format!("combined loss evaluated to {}", v.total)));
    }
    Ok(v)
}
