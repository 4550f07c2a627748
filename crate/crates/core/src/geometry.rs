//! Normalized boxes, overlap measures and the box-noising primitive.
//!
//! Boxes live on the unit canvas in center form `(cx, cy, w, h)`. The corner
//! form `(x0, y0, x1, y1)` is only used for overlap computations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Smallest side a box may have after clamping.
pub const MIN_SIDE: f64 = 1e-4;

/// Axis-aligned box in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Xyxy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Xyxy {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Checked constructor: finite fields, positive sides.
    pub fn try_new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(invalid(format!("invalid box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn to_xyxy(&self) -> Xyxy {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        Xyxy {
            x0: self.cx - hw,
            y0: self.cy - hh,
            x1: self.cx + hw,
            y1: self.cy + hh,
        }
    }

    pub fn from_xyxy(c: Xyxy) -> Self {
        Self {
            cx: (c.x0 + c.x1) / 2.0,
            cy: (c.y0 + c.y1) / 2.0,
            w: c.x1 - c.x0,
            h: c.y1 - c.y0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Whether `(x, y)` lies strictly inside the box.
    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        let c = self.to_xyxy();
        x > c.x0 && x < c.x1 && y > c.y0 && y < c.y1
    }

    /// Clip the corners to the unit canvas and enforce a minimum side.
    pub fn clamp_to_canvas(&self) -> Self {
        let c = self.to_xyxy();
        let clip = |lo: f64, hi: f64| -> (f64, f64) {
            let mut lo = lo.clamp(0.0, 1.0);
            let mut hi = hi.clamp(0.0, 1.0);
            if hi - lo < MIN_SIDE {
                let mid = ((lo + hi) / 2.0).clamp(MIN_SIDE / 2.0, 1.0 - MIN_SIDE / 2.0);
                lo = mid - MIN_SIDE / 2.0;
                hi = mid + MIN_SIDE / 2.0;
            }
            (lo, hi)
        };
        let (x0, x1) = clip(c.x0, c.x1);
        let (y0, y1) = clip(c.y0, c.y1);
        Self::from_xyxy(Xyxy { x0, y0, x1, y1 })
    }

    /// L1 distance between the center-form coordinates.
    pub fn l1(&self, other: &BBox) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn intersection(a: &Xyxy, b: &Xyxy) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    w * h
}

fn enclosing(a: &Xyxy, b: &Xyxy) -> f64 {
    (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0))
}

pub fn iou_xyxy(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn giou_xyxy(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = enclosing(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_xyxy(&a.to_xyxy(), &b.to_xyxy())
}

/// Generalized IoU, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_xyxy(&a.to_xyxy(), &b.to_xyxy())
}

/// Noise scales for denoising queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Center shift scale, in `[0, 1)`.
    pub lambda1: f64,
    /// Side scaling scale, in `[0, 1)`.
    pub lambda2: f64,
    /// Label flip ratio, in `[0, 1]`.
    pub gamma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.4,
            gamma: 0.2,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| (0.0..1.0).contains(&v);
        if !unit_open(self.lambda1) {
            return Err(invalid(format!("lambda1 {} not in [0, 1)", self.lambda1)));
        }
        if !unit_open(self.lambda2) {
            return Err(invalid(format!("lambda2 {} not in [0, 1)", self.lambda2)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Uniform sample from the open interval `(-bound, bound)`; zero when `bound` is zero.
fn symmetric_open<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound <= 0.0 {
        return 0.0;
    }
    loop {
        let v = rng.gen_range(-bound..bound);
        if v != -bound {
            return v;
        }
    }
}

fn scaled_side<R: Rng + ?Sized>(rng: &mut R, side: f64, lambda2: f64) -> f64 {
    if lambda2 <= 0.0 {
        return side;
    }
    rng.gen_range((1.0 - lambda2) * side..=(1.0 + lambda2) * side)
}

/// Shift the center and rescale the sides of `b`, then clamp to the canvas.
///
/// The center moves by less than `lambda1 * side / 2` on each axis, so it
/// stays inside the original box; sides are drawn from
/// `[(1 - lambda2) * side, (1 + lambda2) * side]`.
pub fn apply_box_noise<R: Rng + ?Sized>(b: &BBox, cfg: &NoiseConfig, rng: &mut R) -> BBox {
    let dx = symmetric_open(rng, cfg.lambda1 * b.w / 2.0);
    let dy = symmetric_open(rng, cfg.lambda1 * b.h / 2.0);
    let w = scaled_side(rng, b.w, cfg.lambda2);
    let h = scaled_side(rng, b.h, cfg.lambda2);
    if dx == 0.0 && dy == 0.0 && w == b.w && h == b.h {
        return *b;
    }
    BBox::new(b.cx + dx, b.cy + dy, w, h).clamp_to_canvas()
}
