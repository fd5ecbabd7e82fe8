//! Optimisation loop: alternating image and video batches, Adam with cosine
//! learning-rate decay, checkpointing and a line-delimited JSON loss log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureVolume;
use crate::error::{Error, Result};
use crate::head::{self, TemporalMode};
use crate::io::checkpoint::Checkpoint;
use crate::losses::{self, LossMode, LossWeights, Target};
use crate::model::{self, Model, ModelConfig};
use crate::numerics::{ParamSet, Rng, Session, Tensor, Var};
use crate::scheduler::KeyframePolicy;
use crate::synth::LabeledClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate at step 0 to zero at `steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per image batch, drawn from any clip.
    pub image_batch: usize,
    /// Clips per video batch.
    pub video_batch: usize,
    /// Frames per training clip in video batches.
    pub clip_len: usize,
    /// Keyframes per video batch, spread over the whole source clip.
    pub keyframes: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the global gradient norm down to this value when exceeded.
    pub grad_clip: Option<f64>,
    /// Image steps per cycle; `image_steps: 0` trains on video only.
    pub image_steps: usize,
    /// Video steps per cycle; `video_steps: 0` trains on images only.
    pub video_steps: usize,
    /// Routes batches through the temporal layers; when off they are
    /// bypassed everywhere and never trained.
    pub temporal: bool,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            image_batch: 4,
            video_batch: 1,
            clip_len: 8,
            keyframes: 4,
            lr: 3e-4,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            image_steps: 1,
            video_steps: 1,
            temporal: true,
            seed: 0,
            freeze_encoder: true,
            checkpoint_interval: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if self.image_steps + self.video_steps == 0 {
            return Err(Error::config("image_steps and video_steps cannot both be 0"));
        }
        if self.image_steps > 0 && self.image_batch == 0 {
            return Err(Error::config("image_batch must be positive"));
        }
        if self.video_steps > 0 {
            if self.clip_len < 2 {
                return Err(Error::config(format!("video clips need at least 2 frames, got {}", self.clip_len)));
            }
            if self.video_batch == 0 || self.keyframes == 0 {
                return Err(Error::config("video_batch and keyframes must be positive"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = (step as f64 / self.steps.max(1) as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn mode_at(&self, step: usize) -> LossMode {
        if step % (self.image_steps + self.video_steps) < self.image_steps {
            LossMode::Image
        } else {
            LossMode::Video
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_ssi: f64,
    pub l_gm: f64,
    /// Absent for image batches.
    pub l_tgm: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: usize,
    pub params: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    pub history: Vec<LossRecord>,
}

/// A training clip; `disparity` is the (pseudo) ground truth.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub name: String,
    pub frames: Tensor,
    pub target: Target,
}

impl From<&LabeledClip> for TrainClip {
    fn from(c: &LabeledClip) -> Self {
        TrainClip {
            name: c.name.clone(),
            frames: c.frames.clone(),
            target: Target::dense(&c.disparity).expect("rendered disparity is finite"),
        }
    }
}

struct Prepared {
    clip: TrainClip,
    /// Encoder features of every frame when the encoder is frozen.
    features: Option<FeatureVolume>,
    keyframes: Vec<usize>,
    /// Frames whose ground truth supports alignment.
    usable: Vec<bool>,
}

/// Batch contents chosen for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Batch {
    Image(Vec<(usize, usize)>),
    Video(Vec<(usize, usize)>),
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub state: TrainState,
    data: Vec<Prepared>,
    image_pool: Vec<(usize, usize)>,
    video_pool: Vec<(usize, usize)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, clips: Vec<TrainClip>) -> Result<Self> {
        let state = TrainState {
            step: 0,
            adam_m: ParamSet::new(),
            adam_v: ParamSet::new(),
            params: model.params,
            history: Vec::new(),
        };
        Self::build(config, model.config, state, clips)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: Checkpoint, clips: Vec<TrainClip>) -> Result<Self> {
        Model::from_parts(ckpt.config.clone(), ckpt.params.clone())?;
        let state = TrainState {
            step: ckpt.step as usize,
            params: ckpt.params,
            adam_m: ckpt.adam_m,
            adam_v: ckpt.adam_v,
            history: Vec::new(),
        };
        Self::build(config, ckpt.config, state, clips)
    }

    fn build(config: TrainConfig, mut model_config: ModelConfig, state: TrainState, clips: Vec<TrainClip>) -> Result<Self> {
        config.validate()?;
        model_config.validate()?;
        model_config.freeze_encoder = config.freeze_encoder;
        if clips.is_empty() {
            return Err(Error::config("training needs at least one clip"));
        }
        let model = Model::from_parts(model_config.clone(), state.params.clone())?;
        let policy = KeyframePolicy {
            count: config.keyframes.max(1),
            ..KeyframePolicy::default()
        };
        let mut data = Vec::with_capacity(clips.len());
        let mut image_pool = Vec::new();
        let mut video_pool = Vec::new();
        for (ci, clip) in clips.into_iter().enumerate() {
            let [n, ..] = clip.frames.dims4("training frames")?;
            if clip.target.gt.shape() != [n, 1, clip.frames.shape()[2], clip.frames.shape()[3]] {
                return Err(Error::shape(format!(
                    "clip {}: ground truth {:?} does not match frames {:?}",
                    clip.name,
                    clip.target.gt.shape(),
                    clip.frames.shape()
                )));
            }
            let usable: Vec<bool> = (0..n).map(|f| frame_usable(&clip.target, f)).collect();
            for (f, &ok) in usable.iter().enumerate() {
                if ok {
                    image_pool.push((ci, f));
                }
            }
            if n >= config.clip_len {
                for start in 0..=n - config.clip_len {
                    if usable[start..start + config.clip_len].iter().all(|&u| u) {
                        video_pool.push((ci, start));
                    }
                }
            }
            let features = if config.freeze_encoder {
                Some(model.encode(&clip.frames)?)
            } else {
                None
            };
            data.push(Prepared {
                keyframes: policy.select(n)?,
                clip,
                features,
                usable,
            });
        }
        if config.image_steps > 0 && image_pool.is_empty() {
            return Err(Error::config("no clip frame has ground truth usable for image batches"));
        }
        if config.video_steps > 0 && video_pool.is_empty() {
            return Err(Error::config(format!(
                "no clip holds {} consecutive usable frames for video batches",
                config.clip_len
            )));
        }
        let mut t = Trainer {
            config,
            model_config,
            state,
            data,
            image_pool,
            video_pool,
        };
        t.init_moments();
        Ok(t)
    }

    fn trainable(&self, name: &str) -> bool {
        !(self.config.freeze_encoder && name.starts_with("encoder."))
    }

    fn init_moments(&mut self) {
        let names: Vec<String> = self
            .state
            .params
            .iter()
            .filter(|(n, _)| self.trainable(n))
            .map(|(n, _)| n.clone())
            .collect();
        for n in names {
            let shape = self.state.params.get(&n).unwrap().shape().to_vec();
            if self.state.adam_m.get(&n).is_none() {
                self.state.adam_m.insert(n.clone(), Tensor::zeros(&shape));
            }
            if self.state.adam_v.get(&n).is_none() {
                self.state.adam_v.insert(n, Tensor::zeros(&shape));
            }
        }
    }

    /// Seed identifying the batch of `step`, reported when a step fails.
    pub fn batch_seed(&self, step: usize) -> u64 {
        Rng::new(self.config.seed).fork(step as u64).next_u64()
    }

    fn sample(&self, step: usize) -> Batch {
        let mut rng = Rng::new(self.batch_seed(step));
        match self.config.mode_at(step) {
            LossMode::Image => Batch::Image(
                (0..self.config.image_batch)
                    .map(|_| self.image_pool[rng.below(0, self.image_pool.len())])
                    .collect(),
            ),
            LossMode::Video => Batch::Video(
                (0..self.config.video_batch)
                    .map(|_| self.video_pool[rng.below(0, self.video_pool.len())])
                    .collect(),
            ),
        }
    }

    /// Runs one optimisation step and returns its losses.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.state.step;
        let batch = self.sample(step);
        let (record, grads) = self.loss_and_grads(step, &batch).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!(
                "{m} at step {step} (batch seed {:#018x}, batch {batch:?})",
                self.batch_seed(step)
            )),
            other => other,
        })?;
        self.apply(step, grads)?;
        self.state.step += 1;
        self.state.history.push(record);
        Ok(record)
    }

    fn loss_and_grads(&self, step: usize, batch: &Batch) -> Result<(LossRecord, BTreeMap<String, Tensor>)> {
        let mut s = Session::new(&self.state.params);
        if self.config.freeze_encoder {
            s.freeze_prefix("encoder.");
        }
        let w = &self.config.weights;
        let (ssi, gm, tgm, total) = match batch {
            Batch::Image(items) => {
                let frames: Vec<Tensor> = items
                    .iter()
                    .map(|&(c, f)| self.data[c].clip.frames.select0(&[f]))
                    .collect::<Result<_>>()?;
                let gts: Vec<Tensor> = items
                    .iter()
                    .map(|&(c, f)| self.data[c].clip.target.gt.select0(&[f]))
                    .collect::<Result<_>>()?;
                let masks: Vec<Tensor> = items
                    .iter()
                    .map(|&(c, f)| self.data[c].clip.target.mask.select0(&[f]))
                    .collect::<Result<_>>()?;
                let frames = stack(&frames)?;
                let target = Target::new(&stack(&gts)?, &stack(&masks)?)?;
                let fv = match self.config.freeze_encoder {
                    true => Some(gather_features(
                        items.iter().map(|&(c, f)| (self.data[c].features.as_ref().unwrap(), f)),
                    )?),
                    false => None,
                };
                let pred = self.predict(&mut s, &frames, fv, None)?;
                let t = losses::graph::combined(&mut s.tape, pred, &target, &frames, w, LossMode::Image)?;
                (t.ssi, t.gm, None, t.total)
            }
            Batch::Video(items) => {
                let mut acc: Option<(Var, Var, Var, Var)> = None;
                for &(c, start) in items {
                    let p = &self.data[c];
                    let idx: Vec<usize> = (start..start + self.config.clip_len).collect();
                    let frames = p.clip.frames.select0(&idx)?;
                    let target = Target::new(&p.clip.target.gt.select0(&idx)?, &p.clip.target.mask.select0(&idx)?)?;
                    let fv = p.features.as_ref().map(|fv| fv.select(&idx)).transpose()?;
                    let pred = self.predict(&mut s, &frames, fv, Some(p))?;
                    let t = losses::graph::combined(&mut s.tape, pred, &target, &frames, w, LossMode::Video)?;
                    let tg = t.tgm.expect("video loss has a temporal term");
                    acc = Some(match acc {
                        None => (t.ssi, t.gm, tg, t.total),
                        Some((a, b, c2, d)) => (
                            s.tape.add(a, t.ssi)?,
                            s.tape.add(b, t.gm)?,
                            s.tape.add(c2, tg)?,
                            s.tape.add(d, t.total)?,
                        ),
                    });
                }
                let (a, b, c, d) = acc.expect("video batch is non-empty");
                let k = 1.0 / items.len() as f64;
                (
                    s.tape.mul_const(a, k),
                    s.tape.mul_const(b, k),
                    Some(s.tape.mul_const(c, k)),
                    s.tape.mul_const(d, k),
                )
            }
        };
        let record = LossRecord {
            step,
            l_ssi: s.tape.value(ssi).item(),
            l_gm: s.tape.value(gm).item(),
            l_tgm: tgm.map(|v| s.tape.value(v).item()),
            total: s.tape.value(total).item(),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {}", record.total)));
        }
        let grads = s.backward(total)?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
        }
        Ok((record, grads))
    }

    /// Depth graph for `frames`, from cached taps `fv` when the encoder is
    /// frozen. `keys` supplies the clip whose keyframes video batches attend
    /// to; image batches (`None`) use each frame as its own keyframe.
    fn predict(&self, s: &mut Session, frames: &Tensor, fv: Option<FeatureVolume>, keys: Option<&Prepared>) -> Result<Var> {
        let cfg = &self.model_config;
        let taps_of = |s: &mut Session, fv: Option<FeatureVolume>, pixels: Tensor| -> Result<Vec<Var>> {
            match fv {
                Some(fv) => Ok(fv.taps.into_iter().map(|t| s.tape.constant(t)).collect()),
                None => {
                    let x = s.tape.constant(pixels);
                    crate::encoder::encode_graph(s, &cfg.encoder, x)
                }
            }
        };
        let taps = taps_of(s, fv, frames.clone())?;
        let mode = match (self.config.temporal, keys) {
            (false, _) => TemporalMode::Bypass,
            (true, None) => TemporalMode::SelfKeyframe,
            (true, Some(p)) => {
                let kfv = p.features.as_ref().map(|fv| fv.select(&p.keyframes)).transpose()?;
                let kt = taps_of(s, kfv, p.clip.frames.select0(&p.keyframes)?)?;
                TemporalMode::Keyframes(model::graph::keyframe_sites(s, &cfg.head, &kt)?)
            }
        };
        let hw = (frames.shape()[2], frames.shape()[3]);
        Ok(head::head_graph(s, &cfg.head, &taps, &mode, hw)?.depth)
    }

    fn apply(&mut self, step: usize, mut grads: BTreeMap<String, Tensor>) -> Result<()> {
        let lr = self.config.lr_at(step);
        if lr == 0.0 {
            return Ok(());
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let k = clip / norm;
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        let c = &self.config;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let m = self.state.adam_m.get_mut(&name).ok_or_else(|| Error::config(format!("no optimiser state for {name}")))?;
            let v = self.state.adam_v.get_mut(&name).ok_or_else(|| Error::config(format!("no optimiser state for {name}")))?;
            let p = self.state.params.get_mut(&name).unwrap();
            let (m, v, p) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.model_config.clone(), self.state.params.clone())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.model_config.clone(),
            step: self.state.step as u64,
            params: self.state.params.clone(),
            adam_m: self.state.adam_m.clone(),
            adam_v: self.state.adam_v.clone(),
            extra: serde_json::json!({ "train": serde_json::to_value(&self.config)? }),
        })
    }

    /// Runs until `config.steps`, writing `loss.jsonl` and checkpoints under
    /// `out` when given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Checkpoint> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("loss.jsonl");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        while self.state.step < self.config.steps {
            let rec = self.step()?;
            if let Some((path, w)) = log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            let done = self.state.step;
            if let Some(dir) = out {
                if self.config.checkpoint_interval > 0 && done.is_multiple_of(self.config.checkpoint_interval) && done < self.config.steps {
                    if let Some((path, w)) = log.as_mut() {
                        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    self.checkpoint()?.save(&dir.join(format!("step_{done:06}.sdpt")))?;
                }
            }
            if done.is_multiple_of(100) {
                log::info!("step {done}/{}: total {:.5}", self.config.steps, rec.total);
            }
        }
        if let Some((path, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let ckpt = self.checkpoint()?;
        if let Some(dir) = out {
            ckpt.save(&dir.join("final.sdpt"))?;
        }
        Ok(ckpt)
    }

    /// Frames of clip `c` usable for image batches.
    pub fn usable_frames(&self, c: usize) -> usize {
        self.data[c].usable.iter().filter(|&&u| u).count()
    }
}

/// Trains `model` on `clips` from scratch.
pub fn train(config: TrainConfig, model: Model, clips: Vec<TrainClip>, out: Option<&Path>) -> Result<Checkpoint> {
    Trainer::new(config, model, clips)?.run(out)
}

fn frame_usable(target: &Target, f: usize) -> bool {
    let gt = target.gt.index0(f);
    let mask = target.mask.index0(f);
    let vals: Vec<f64> = gt
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&g, _)| g)
        .collect();
    if vals.len() < 2 {
        return false;
    }
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo > 1e-12 * hi.abs().max(lo.abs())
}

fn stack(ts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = ts.iter().collect();
    Tensor::concat0(&refs)
}

fn gather_features<'a>(items: impl Iterator<Item = (&'a FeatureVolume, usize)>) -> Result<FeatureVolume> {
    let parts = items.map(|(fv, f)| fv.select(&[f])).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureVolume> = parts.iter().collect();
    FeatureVolume::concat(&refs)
}
