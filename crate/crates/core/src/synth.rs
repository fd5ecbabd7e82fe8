//! Procedural layered videos with exact depth, optical flow and occlusion.
//!
//! A scene is a stack of flat textured layers (rectangles, disks and
//! full-frame planes). Each layer has an affine pose per frame (translation
//! plus isotropic scale) and a disparity that is affine in the layer's own
//! coordinates, so a point keeps its disparity while it moves and forward
//! flow follows in closed form. Only integer arithmetic, IEEE basic
//! operations and `floor` are used, so renders are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FlowField;
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
    /// Covers the whole frame.
    Plane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Image position `(x, y)` of the layer origin at frame 0.
    pub center: [f64; 2],
    /// Own motion in pixels per frame.
    pub velocity: [f64; 2],
    pub scale: f64,
    /// Added to the scale every frame.
    pub scale_rate: f64,
    /// Disparity at the layer origin.
    pub disparity: f64,
    /// Disparity change per unit of layer coordinate.
    pub disparity_grad: [f64; 2],
    pub color: [f64; 3],
    pub texture_amp: f64,
    /// Side of a value-noise cell in layer units.
    pub texture_cell: f64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    /// Camera pan in pixels per frame at unit disparity; each layer moves by
    /// this times its origin disparity.
    pub camera: [f64; 2],
    /// Global brightness offset alternating in sign every frame.
    pub flicker: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub name: String,
    /// `[n, 3, h, w]`, values on the 1/255 grid in `[0, 1]`.
    pub frames: Tensor,
    /// Ground-truth inverse depth `[n, 1, h, w]`.
    pub disparity: Tensor,
    pub flow: FlowField,
    /// `[n−1, 1, h, w]`: 1 where the point is hidden by another layer in the next frame.
    pub occlusion: Tensor,
}

impl LabeledClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> Tensor {
        self.disparity.map(|d| 1.0 / d)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    /// Frames `start..start+len` with matching labels.
    pub fn window(&self, start: usize, len: usize) -> Result<LabeledClip> {
        if len == 0 || start + len > self.len() {
            return Err(Error::shape(format!(
                "window {start}..{} out of range for {} frames",
                start + len,
                self.len()
            )));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let pidx: Vec<usize> = (start..start + len - 1).collect();
        let (flow, valid, occlusion) = if pidx.is_empty() {
            let (h, w) = self.size();
            (Tensor::zeros(&[0, 2, h, w]), Tensor::zeros(&[0, 1, h, w]), Tensor::zeros(&[0, 1, h, w]))
        } else {
            (
                self.flow.flow.select0(&pidx)?,
                self.flow.valid.select0(&pidx)?,
                self.occlusion.select0(&pidx)?,
            )
        };
        Ok(LabeledClip {
            name: self.name.clone(),
            frames: self.frames.select0(&idx)?,
            disparity: self.disparity.select0(&idx)?,
            flow: FlowField { flow, valid },
            occlusion,
        })
    }
}

/// Minimum disparity a rendered pixel may have.
pub const MIN_DISPARITY: f64 = 1e-3;

struct Pose {
    cx: f64,
    cy: f64,
    s: f64,
}

fn pose(o: &ObjectSpec, t: usize, camera: [f64; 2]) -> Pose {
    let t = t as f64;
    Pose {
        cx: o.center[0] + (o.velocity[0] + camera[0] * o.disparity) * t,
        cy: o.center[1] + (o.velocity[1] + camera[1] * o.disparity) * t,
        s: o.scale + o.scale_rate * t,
    }
}

fn covers(shape: &Shape, u: f64, v: f64) -> bool {
    match *shape {
        Shape::Rect { half_w, half_h } => u.abs() <= half_w && v.abs() <= half_h,
        Shape::Disk { radius } => u * u + v * v <= radius * radius,
        Shape::Plane => true,
    }
}

fn hash(x: i64, y: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x as u64, y as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(27).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated lattice noise in `[0, 1)`.
pub fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (iu, iv) = (fu as i64, fv as i64);
    let (a, b) = (u - fu, v - fv);
    let n00 = hash(iu, iv, seed);
    let n10 = hash(iu + 1, iv, seed);
    let n01 = hash(iu, iv + 1, seed);
    let n11 = hash(iu + 1, iv + 1, seed);
    (n00 * (1.0 - a) + n10 * a) * (1.0 - b) + (n01 * (1.0 - a) + n11 * a) * b
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() / 255.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.frames == 0 {
            return Err(Error::config(format!(
                "scene needs at least 2x2 pixels and one frame, got {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let last = pose(o, self.frames - 1, self.camera);
            if !(o.scale > 0.0 && last.s > 0.0) {
                return Err(Error::config(format!("object {i} has nonpositive scale")));
            }
            if !(o.texture_cell > 0.0) {
                return Err(Error::config(format!("object {i} needs a positive texture cell")));
            }
        }
        Ok(())
    }

    /// Topmost layer at pixel `(x, y)` of frame `t`, with its layer coordinates.
    fn top(&self, poses: &[Pose], x: f64, y: f64) -> Option<(usize, f64, f64, f64)> {
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for (i, (o, p)) in self.objects.iter().zip(poses).enumerate() {
            let u = (x - p.cx) / p.s;
            let v = (y - p.cy) / p.s;
            if !covers(&o.shape, u, v) {
                continue;
            }
            let d = o.disparity + o.disparity_grad[0] * u + o.disparity_grad[1] * v;
            if best.is_none_or(|b| d >= b.3) {
                best = Some((i, u, v, d));
            }
        }
        best
    }
}

/// Rasterises `spec` into frames, disparity, forward flow and occlusion.
pub fn render(spec: &SceneSpec, name: &str) -> Result<LabeledClip> {
    spec.validate()?;
    let (n, h, w) = (spec.frames, spec.height, spec.width);
    let hw = h * w;
    let mut frames = vec![0.0; n * 3 * hw];
    let mut disp = vec![0.0; n * hw];
    let mut ids = vec![0usize; n * hw];
    let mut coords = vec![(0.0, 0.0); n * hw];
    for t in 0..n {
        let poses: Vec<Pose> = spec.objects.iter().map(|o| pose(o, t, spec.camera)).collect();
        let flick = if t % 2 == 0 { spec.flicker } else { -spec.flicker };
        for p in 0..hw {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let (id, u, v, d) = spec.top(&poses, x, y).ok_or_else(|| {
                Error::config(format!("pixel ({x}, {y}) of frame {t} is not covered; add a plane layer"))
            })?;
            if !(d >= MIN_DISPARITY) {
                return Err(Error::config(format!(
                    "disparity {d} at pixel ({x}, {y}) of frame {t} is below {MIN_DISPARITY}"
                )));
            }
            let o = &spec.objects[id];
            let tex = value_noise(u / o.texture_cell, v / o.texture_cell, o.texture_seed) - 0.5;
            for c in 0..3 {
                frames[(t * 3 + c) * hw + p] = quantize(o.color[c] + o.texture_amp * tex + flick);
            }
            disp[t * hw + p] = d;
            ids[t * hw + p] = id;
            coords[t * hw + p] = (u, v);
        }
    }

    let pairs = n - 1;
    let mut flow = vec![0.0; pairs * 2 * hw];
    let mut valid = vec![0.0; pairs * hw];
    let mut occl = vec![0.0; pairs * hw];
    for i in 0..pairs {
        let poses: Vec<Pose> = spec.objects.iter().map(|o| pose(o, i + 1, spec.camera)).collect();
        for p in 0..hw {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let id = ids[i * hw + p];
            let (u, v) = coords[i * hw + p];
            let q = &poses[id];
            let (fx, fy) = (q.cx + q.s * u - x, q.cy + q.s * v - y);
            flow[(i * 2) * hw + p] = fx;
            flow[(i * 2 + 1) * hw + p] = fy;
            let (sx, sy) = (x + fx, y + fy);
            if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            let mut same = true;
            for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                    if wy * wx == 0.0 {
                        continue;
                    }
                    let (yy, xx) = ((y0 + dy).min(h - 1), (x0 + dx).min(w - 1));
                    same &= ids[(i + 1) * hw + yy * w + xx] == id;
                }
            }
            if same {
                valid[i * hw + p] = 1.0;
            } else {
                occl[i * hw + p] = 1.0;
            }
        }
    }
    Ok(LabeledClip {
        name: name.to_string(),
        frames: Tensor::new(&[n, 3, h, w], frames)?,
        disparity: Tensor::new(&[n, 1, h, w], disp)?,
        flow: FlowField {
            flow: Tensor::new(&[pairs, 2, h, w], flow).unwrap_or_else(|_| Tensor::zeros(&[0, 2, h, w])),
            valid: Tensor::new(&[pairs, 1, h, w], valid).unwrap_or_else(|_| Tensor::zeros(&[0, 1, h, w])),
        },
        occlusion: Tensor::new(&[pairs, 1, h, w], occl).unwrap_or_else(|_| Tensor::zeros(&[0, 1, h, w])),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            height: 32,
            width: 32,
            frames: 32,
        }
    }
}

pub const SUITE_NAMES: [&str; 9] = [
    "static",
    "slow_pan",
    "fast_pan",
    "flicker",
    "occlusion",
    "ramp_zoom",
    "diagonal",
    "mixed",
    "ramp_pan",
];

fn background(rng: &mut Rng, cfg: &SuiteConfig, tilt: f64) -> ObjectSpec {
    ObjectSpec {
        shape: Shape::Plane,
        center: [cfg.width as f64 / 2.0, cfg.height as f64 / 2.0],
        velocity: [0.0, 0.0],
        scale: 1.0,
        scale_rate: 0.0,
        disparity: rng.uniform(0.15, 0.25),
        disparity_grad: [0.0, tilt],
        color: [rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6)],
        texture_amp: rng.uniform(0.2, 0.35),
        texture_cell: rng.uniform(3.0, 6.0),
        texture_seed: rng.next_u64(),
    }
}

fn blob(rng: &mut Rng, cfg: &SuiteConfig, speed: f64) -> ObjectSpec {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let size = rng.uniform(0.12, 0.25) * w.min(h);
    let shape = if rng.bernoulli(0.5) {
        Shape::Disk { radius: size }
    } else {
        Shape::Rect {
            half_w: size,
            half_h: size * rng.uniform(0.6, 1.4),
        }
    };
    let angle_x = rng.uniform(-1.0, 1.0);
    let angle_y = rng.uniform(-1.0, 1.0);
    let norm = (angle_x * angle_x + angle_y * angle_y).sqrt().max(1e-3);
    ObjectSpec {
        shape,
        center: [rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h],
        velocity: [speed * angle_x / norm, speed * angle_y / norm],
        scale: 1.0,
        scale_rate: 0.0,
        disparity: rng.uniform(0.4, 1.0),
        disparity_grad: [0.0, 0.0],
        color: [rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)],
        texture_amp: rng.uniform(0.15, 0.35),
        texture_cell: rng.uniform(2.0, 5.0),
        texture_seed: rng.next_u64(),
    }
}

/// Scene description of suite clip `name`.
pub fn suite_scene(name: &str, seed: u64, cfg: &SuiteConfig) -> Result<SceneSpec> {
    let pos = SUITE_NAMES
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| Error::config(format!("unknown suite clip {name:?}")))?;
    let mut rng = Rng::new(seed).fork(pos as u64 + 1);
    let h = cfg.height as f64;
    let mut spec = SceneSpec {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        objects: vec![],
        camera: [0.0, 0.0],
        flicker: 0.0,
    };
    match name {
        "static" => {
            spec.objects.push(background(&mut rng, cfg, 0.004));
            for _ in 0..2 {
                spec.objects.push(blob(&mut rng, cfg, 0.0));
            }
        }
        "slow_pan" | "fast_pan" => {
            spec.objects.push(background(&mut rng, cfg, 0.0));
            for _ in 0..2 {
                spec.objects.push(blob(&mut rng, cfg, 0.0));
            }
            spec.camera = if name == "slow_pan" { [0.5, 0.0] } else { [2.0, 0.5] };
        }
        "flicker" => {
            spec.objects.push(background(&mut rng, cfg, 0.0));
            for _ in 0..2 {
                spec.objects.push(blob(&mut rng, cfg, 0.5));
            }
            spec.flicker = 0.015;
        }
        "occlusion" => {
            spec.objects.push(background(&mut rng, cfg, 0.0));
            for k in 0..4 {
                let mut o = blob(&mut rng, cfg, 1.0);
                let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
                o.velocity = [dir * rng.uniform(0.7, 1.3), 0.0];
                o.center[1] = h * (0.3 + 0.13 * k as f64);
                spec.objects.push(o);
            }
        }
        "ramp_zoom" => {
            spec.objects.push(background(&mut rng, cfg, 0.006));
            let mut o = blob(&mut rng, cfg, 0.0);
            o.shape = Shape::Rect {
                half_w: 0.2 * h,
                half_h: 0.15 * h,
            };
            o.center = [cfg.width as f64 / 2.0, h / 2.0];
            o.disparity = 0.6;
            o.disparity_grad = [0.03, 0.0];
            o.scale_rate = 0.02;
            spec.objects.push(o);
        }
        "diagonal" => {
            spec.objects.push(background(&mut rng, cfg, 0.0));
            for _ in 0..3 {
                let mut o = blob(&mut rng, cfg, 0.0);
                o.velocity = [rng.uniform(0.3, 0.8), rng.uniform(-0.6, -0.2)];
                spec.objects.push(o);
            }
        }
        "mixed" => {
            spec.objects.push(background(&mut rng, cfg, 0.003));
            for _ in 0..3 {
                let speed = rng.uniform(0.2, 1.2);
                spec.objects.push(blob(&mut rng, cfg, speed));
            }
            spec.camera = [rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5)];
        }
        "ramp_pan" => {
            spec.objects.push(background(&mut rng, cfg, 0.008));
            let mut o = blob(&mut rng, cfg, 0.0);
            o.disparity_grad = [0.02, -0.01];
            spec.objects.push(o);
            spec.camera = [1.0, 0.0];
        }
        _ => unreachable!(),
    }
    Ok(spec)
}

/// The fixed benchmark suite, fully determined by `seed`.
pub fn make_suite(seed: u64, cfg: &SuiteConfig) -> Result<Vec<LabeledClip>> {
    SUITE_NAMES
        .iter()
        .map(|&n| render(&suite_scene(n, seed, cfg)?, n))
        .collect()
}
