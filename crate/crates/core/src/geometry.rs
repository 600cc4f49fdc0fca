//! Box geometry, frame-normalized velocities and overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::InvalidGeometry(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::DegenerateBox {
                w: self.w,
                h: self.h,
            });
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }
}

/// Image size of the frames a sequence was recorded at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: f64,
    pub height: f64,
}

impl FrameGeometry {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        let f = FrameGeometry { width, height };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.height.is_finite())
            || self.width <= 0.0
            || self.height <= 0.0
        {
            return Err(Error::InvalidGeometry(format!(
                "frame must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// One of the four velocity components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    W,
    H,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::X, Axis::Y, Axis::W, Axis::H];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::W => 2,
            Axis::H => 3,
        }
    }
}

/// Per-frame box motion normalized by frame size.
///
/// `dx` and `dw` are divided by the frame width, `dy` and `dh` by the frame
/// height, so the same physical motion maps to the same token regardless of
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl VelocityDelta {
    pub const ZERO: VelocityDelta = VelocityDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        VelocityDelta { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        VelocityDelta::new(a[0], a[1], a[2], a[3])
    }

    pub fn component(&self, axis: Axis) -> f64 {
        self.to_array()[axis.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Normalized velocity that carries `prev` onto `next`.
pub fn velocity(
    prev: &BoundingBox,
    next: &BoundingBox,
    frame: &FrameGeometry,
) -> Result<VelocityDelta> {
    frame.validate()?;
    let d = VelocityDelta {
        dx: (next.x - prev.x) / frame.width,
        dy: (next.y - prev.y) / frame.height,
        dw: (next.w - prev.w) / frame.width,
        dh: (next.h - prev.h) / frame.height,
    };
    if !d.is_finite() {
        return Err(Error::InvalidGeometry(format!(
            "non-finite velocity between {prev:?} and {next:?}"
        )));
    }
    Ok(d)
}

/// Inverse of [`velocity`]: moves `prev` by `delta`.
pub fn apply_velocity(
    prev: &BoundingBox,
    delta: &VelocityDelta,
    frame: &FrameGeometry,
) -> Result<BoundingBox> {
    frame.validate()?;
    BoundingBox::new(
        prev.x + delta.dx * frame.width,
        prev.y + delta.dy * frame.height,
        prev.w + delta.dw * frame.width,
        prev.h + delta.dh * frame.height,
    )
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
