//! Synthetic sequences with closed-form flow and disocclusion ground truth.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::grid::{Boundary, FrameImage};
use crate::kv::{KeyValues, ParseError};
use crate::mask::BinaryMask;
use crate::pipeline::SequenceBundle;

const NOISE_COMPONENTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Pattern {
    /// Sum of random cosines with integer frequencies up to `bands` cycles
    /// per pattern period.
    Noise {
        bands: u32,
    },
    Gradient,
    Checkerboard {
        period: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Motion {
    Static,
    /// Pixels per frame.
    Translate {
        dx: f64,
        dy: f64,
    },
    /// Radians per frame, counter-clockwise in image coordinates.
    Rotate {
        theta: f64,
        center: Option<(f64, f64)>,
    },
    /// Textured rectangle moving over a static background.
    Occluder {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
        vx: f64,
        vy: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub pattern: Pattern,
    pub motion: Motion,
    /// Toroidal canvas. Only valid for static and translating scenes.
    pub periodic: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 8,
            seed: 0,
            pattern: Pattern::Noise { bands: 3 },
            motion: Motion::Translate { dx: 2.0, dy: 0.0 },
            periodic: false,
        }
    }
}

const SCENE_KEYS: &[&str] = &[
    "width",
    "height",
    "frames",
    "seed",
    "pattern",
    "bands",
    "period",
    "motion",
    "dx",
    "dy",
    "theta",
    "center_x",
    "center_y",
    "occluder_x",
    "occluder_y",
    "occluder_w",
    "occluder_h",
    "vx",
    "vy",
    "periodic",
];

impl SceneSpec {
    pub fn parse(text: &str) -> std::result::Result<Self, ParseError> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(SCENE_KEYS)?;
        let d = Self::default();
        let bad = |message: String| ParseError { line: None, message };
        let pattern = match kv.raw("pattern").unwrap_or("noise") {
            "noise" => Pattern::Noise {
                bands: kv.get_or("bands", 3)?,
            },
            "gradient" => Pattern::Gradient,
            "checkerboard" => Pattern::Checkerboard {
                period: kv.get_or("period", 8.0)?,
            },
            other => return Err(bad(format!("unknown pattern '{other}'"))),
        };
        let motion = match kv.raw("motion").unwrap_or("translate") {
            "static" => Motion::Static,
            "translate" => Motion::Translate {
                dx: kv.get_or("dx", 2.0)?,
                dy: kv.get_or("dy", 0.0)?,
            },
            "rotate" => {
                let center = match (kv.get::<f64>("center_x")?, kv.get::<f64>("center_y")?) {
                    (Some(x), Some(y)) => Some((x, y)),
                    (None, None) => None,
                    _ => return Err(bad("center_x and center_y go together".into())),
                };
                Motion::Rotate {
                    theta: kv.require("theta")?,
                    center,
                }
            }
            "occluder" => Motion::Occluder {
                x: kv.require("occluder_x")?,
                y: kv.require("occluder_y")?,
                width: kv.require("occluder_w")?,
                height: kv.require("occluder_h")?,
                vx: kv.get_or("vx", 0.0)?,
                vy: kv.get_or("vy", 0.0)?,
            },
            other => return Err(bad(format!("unknown motion '{other}'"))),
        };
        let spec = Self {
            width: kv.get_or("width", d.width)?,
            height: kv.get_or("height", d.height)?,
            frames: kv.get_or("frames", d.frames)?,
            seed: kv.get_or("seed", d.seed)?,
            pattern,
            motion,
            periodic: kv.get_or("periodic", false)?,
        };
        spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(spec)
    }

    /// Inverse of [`SceneSpec::parse`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "width={}\nheight={}\nframes={}\nseed={}",
            self.width, self.height, self.frames, self.seed
        );
        match self.pattern {
            Pattern::Noise { bands } => {
                let _ = writeln!(s, "pattern=noise\nbands={bands}");
            }
            Pattern::Gradient => s.push_str("pattern=gradient\n"),
            Pattern::Checkerboard { period } => {
                let _ = writeln!(s, "pattern=checkerboard\nperiod={period}");
            }
        }
        match self.motion {
            Motion::Static => s.push_str("motion=static\n"),
            Motion::Translate { dx, dy } => {
                let _ = writeln!(s, "motion=translate\ndx={dx}\ndy={dy}");
            }
            Motion::Rotate { theta, center } => {
                let _ = writeln!(s, "motion=rotate\ntheta={theta}");
                if let Some((x, y)) = center {
                    let _ = writeln!(s, "center_x={x}\ncenter_y={y}");
                }
            }
            Motion::Occluder {
                x,
                y,
                width,
                height,
                vx,
                vy,
            } => {
                let _ = writeln!(
                    s,
                    "motion=occluder\noccluder_x={x}\noccluder_y={y}\noccluder_w={width}\noccluder_h={height}\nvx={vx}\nvy={vy}"
                );
            }
        }
        let _ = writeln!(s, "periodic={}", self.periodic);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Validation("canvas must be at least 2x2".into()));
        }
        if self.frames < 2 {
            return Err(Error::Validation("a scene needs at least two frames".into()));
        }
        match self.pattern {
            Pattern::Noise { bands: 0 } => return Err(Error::Validation("noise needs at least one band".into())),
            Pattern::Checkerboard { period } if !(period > 0.0 && period.is_finite()) => {
                return Err(Error::Validation("checkerboard period must be positive".into()))
            }
            _ => {}
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self.motion {
            Motion::Static => {}
            Motion::Translate { dx, dy } => {
                if !finite(&[dx, dy]) {
                    return Err(Error::Validation("translation must be finite".into()));
                }
            }
            Motion::Rotate { theta, .. } => {
                let (cx, cy) = self.rotation_center();
                if !finite(&[theta, cx, cy]) {
                    return Err(Error::Validation("rotation must be finite".into()));
                }
                if cx < 0.0 || cy < 0.0 || cx > (self.width - 1) as f64 || cy > (self.height - 1) as f64 {
                    return Err(Error::Validation(format!(
                        "rotation centre ({cx}, {cy}) is off the canvas"
                    )));
                }
            }
            Motion::Occluder {
                x,
                y,
                width,
                height,
                vx,
                vy,
            } => {
                if !finite(&[x, y, width, height, vx, vy]) || width <= 0.0 || height <= 0.0 {
                    return Err(Error::Validation("occluder needs a finite, non-empty rectangle".into()));
                }
            }
        }
        if self.periodic && !matches!(self.motion, Motion::Static | Motion::Translate { .. }) {
            return Err(Error::Validation(
                "periodic canvases support static and translating scenes only".into(),
            ));
        }
        Ok(())
    }

    fn rotation_center(&self) -> (f64, f64) {
        match self.motion {
            Motion::Rotate { center: Some(c), .. } => c,
            _ => ((self.width - 1) as f64 / 2.0, (self.height - 1) as f64 / 2.0),
        }
    }

    pub fn boundary(&self) -> Boundary {
        if self.periodic {
            Boundary::Wrap
        } else {
            Boundary::Clamp
        }
    }
}

/// Analytic RGB texture evaluated at continuous coordinates.
struct Texture {
    pattern: Pattern,
    /// Pattern period in pixels along x and y.
    period: (f64, f64),
    /// Per channel: `(amplitude, kx, ky, phase)`.
    components: [Vec<(f64, f64, f64, f64)>; 3],
}

impl Texture {
    fn new(pattern: Pattern, period: (f64, f64), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let components = std::array::from_fn(|_| match pattern {
            Pattern::Noise { bands } => (0..NOISE_COMPONENTS)
                .map(|_| {
                    let b = bands as i64;
                    let (kx, ky) = loop {
                        let k = (rng.random_range(-b..=b), rng.random_range(-b..=b));
                        if k != (0, 0) {
                            break k;
                        }
                    };
                    let amp = 0.4 / NOISE_COMPONENTS as f64 * rng.random_range(0.5..1.0);
                    (amp, kx as f64, ky as f64, rng.random_range(0.0..TAU))
                })
                .collect(),
            _ => vec![(rng.random_range(0.2..0.8), 0.0, 0.0, 0.0)],
        });
        Self {
            pattern,
            period,
            components,
        }
    }

    fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let (px, py) = self.period;
        let v = match self.pattern {
            Pattern::Noise { .. } => {
                0.5 + self.components[c]
                    .iter()
                    .map(|&(a, kx, ky, phase)| a * (TAU * (kx * x / px + ky * y / py) + phase).cos())
                    .sum::<f64>()
            }
            Pattern::Gradient => {
                let tri = |t: f64| 1.0 - (2.0 * t.rem_euclid(1.0) - 1.0).abs();
                let (gx, gy) = (tri(x / px), tri(y / py));
                let mix = [gx, gy, 0.5 * (gx + gy)][c];
                0.1 + 0.8 * mix
            }
            Pattern::Checkerboard { period } => {
                let cell = ((x / period).floor() + (y / period).floor()).rem_euclid(2.0);
                let tint = self.components[c][0].0;
                if cell < 1.0 {
                    tint
                } else {
                    1.0 - tint
                }
            }
        };
        v as f32
    }
}

struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

fn occluder_rect(motion: &Motion, k: usize) -> Option<Rect> {
    match *motion {
        Motion::Occluder {
            x,
            y,
            width,
            height,
            vx,
            vy,
        } => Some(Rect {
            x: x + k as f64 * vx,
            y: y + k as f64 * vy,
            w: width,
            h: height,
        }),
        _ => None,
    }
}

/// Where pixel `(x, y)` of frame `k` shows frame-0 background content.
fn background_source(spec: &SceneSpec, k: usize, x: f64, y: f64) -> (f64, f64) {
    let kf = k as f64;
    match spec.motion {
        Motion::Static | Motion::Occluder { .. } => (x, y),
        Motion::Translate { dx, dy } => {
            let (sx, sy) = (x - kf * dx, y - kf * dy);
            if spec.periodic {
                (sx.rem_euclid(spec.width as f64), sy.rem_euclid(spec.height as f64))
            } else {
                (sx, sy)
            }
        }
        Motion::Rotate { theta, .. } => {
            let (cx, cy) = spec.rotation_center();
            rotate_about(x, y, cx, cy, -kf * theta)
        }
    }
}

fn rotate_about(x: f64, y: f64, cx: f64, cy: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (rx, ry) = (x - cx, y - cy);
    (cx + c * rx - s * ry, cy + s * rx + c * ry)
}

fn in_canvas(spec: &SceneSpec, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (spec.width - 1) as f64 && y <= (spec.height - 1) as f64
}

/// Displacement of pixel `(x, y)` of frame `k` into frame `k + step`,
/// where `step` is `1` or `-1`.
fn displacement(spec: &SceneSpec, k: usize, x: f64, y: f64, step: f64) -> (f32, f32) {
    match spec.motion {
        Motion::Static => (0.0, 0.0),
        Motion::Translate { dx, dy } => ((step * dx) as f32, (step * dy) as f32),
        Motion::Rotate { theta, .. } => {
            let (cx, cy) = spec.rotation_center();
            let (tx, ty) = rotate_about(x, y, cx, cy, step * theta);
            ((tx - x) as f32, (ty - y) as f32)
        }
        Motion::Occluder { vx, vy, .. } => {
            let rect = occluder_rect(&spec.motion, k).expect("occluder motion");
            if rect.contains(x, y) {
                ((step * vx) as f32, (step * vy) as f32)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Renders the scene and its exact forward and backward flows.
pub fn generate(spec: &SceneSpec) -> Result<SequenceBundle> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let period = if spec.periodic {
        (w as f64, h as f64)
    } else {
        (2.0 * w as f64, 2.0 * h as f64)
    };
    let background = Texture::new(spec.pattern, period, spec.seed);
    let foreground = Texture::new(
        Pattern::Noise { bands: 4 },
        (w as f64, h as f64),
        spec.seed ^ 0x5eed_0cc1,
    );

    let mut frames = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let rect = occluder_rect(&spec.motion, k);
        let frame = FrameImage::from_fn(h, w, |c, y, x| {
            let (xf, yf) = (x as f64, y as f64);
            if let (Some(r), Motion::Occluder { vx, vy, .. }) = (&rect, spec.motion) {
                if r.contains(xf, yf) {
                    let kf = k as f64;
                    return 1.0 - foreground.sample(c, xf - kf * vx, yf - kf * vy);
                }
            }
            let (sx, sy) = background_source(spec, k, xf, yf);
            background.sample(c, sx, sy)
        })?;
        frames.push(frame);
    }

    let mut prev_to_cur = Vec::with_capacity(spec.frames - 1);
    let mut cur_to_prev = Vec::with_capacity(spec.frames - 1);
    let mut disocclusion = Vec::with_capacity(spec.frames - 1);
    for k in 1..spec.frames {
        prev_to_cur.push(FlowField::from_fn(h, w, |y, x| {
            displacement(spec, k - 1, x as f64, y as f64, 1.0)
        })?);
        let back = FlowField::from_fn(h, w, |y, x| displacement(spec, k, x as f64, y as f64, -1.0))?;
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let (u, v) = back.at(y, x);
                let source_visible = spec.periodic || in_canvas(spec, xf + u as f64, yf + v as f64);
                let revealed = match (occluder_rect(&spec.motion, k - 1), occluder_rect(&spec.motion, k)) {
                    (Some(before), Some(now)) => before.contains(xf, yf) && !now.contains(xf, yf),
                    _ => false,
                };
                bits.push(revealed || !source_visible);
            }
        }
        disocclusion.push(BinaryMask::new(h, w, bits)?);
        cur_to_prev.push(back);
    }

    let bundle = SequenceBundle {
        frames,
        prev_to_cur,
        cur_to_prev,
        boundary: spec.boundary(),
        disocclusion: Some(disocclusion),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// [`generate`] on a toroidal canvas, so integer shifts are exact
/// permutations of the frame.
pub fn periodic_shift_variant(spec: &SceneSpec) -> Result<SequenceBundle> {
    let mut spec = spec.clone();
    spec.periodic = true;
    generate(&spec)
}
