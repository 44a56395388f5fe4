//! Axis-aligned rectangle algebra in integer pixel coordinates.
//!
//! Boxes are half-open: `[x1, x2) x [y1, y2)`, so a box touching another only
//! along an edge does not overlap it, and `x2 - x1` is the crop width.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("coordinate space must be at least 1x1, got {width}x{height}")]
    EmptySpace { width: u32, height: u32 },
    #[error("boxes live in different coordinate spaces ({a} vs {b})")]
    SpaceMismatch { a: CoordSpace, b: CoordSpace },
    #[error("coverage needs at least one ground-truth box")]
    MissingGroundTruth,
}

/// Why a raw region could not be turned into a croppable box.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum InvalidRegion {
    #[error("expected 4 coordinates, got {got}")]
    WrongArity { got: usize },
    #[error("coordinate {index} is not a finite number")]
    NonFinite { index: usize },
    #[error("region has zero width after clamping")]
    ZeroWidth,
    #[error("region has zero height after clamping")]
    ZeroHeight,
    #[error("region corners are reversed")]
    Reversed,
    #[error("region ({x1},{y1},{x2},{y2}) lies outside {space}")]
    OutOfBounds {
        x1: i64,
        y1: i64,
        x2: i64,
        y2: i64,
        space: CoordSpace,
    },
}

/// Pixel dimensions of an image, naming the space a box lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoordSpace {
    width: u32,
    height: u32,
}

impl CoordSpace {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptySpace { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// The box covering the whole space.
    pub fn full_box(&self) -> BBox {
        BBox {
            x1: 0,
            y1: 0,
            x2: self.width,
            y2: self.height,
            space: *self,
        }
    }
}

impl fmt::Display for CoordSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A validated, non-empty rectangle inside its [`CoordSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct BBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
    #[serde(skip)]
    space: CoordSpace,
}

impl BBox {
    /// Strict constructor: rejects anything that would need clamping.
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64, space: CoordSpace) -> Result<Self, InvalidRegion> {
        if x1 == x2 {
            return Err(InvalidRegion::ZeroWidth);
        }
        if y1 == y2 {
            return Err(InvalidRegion::ZeroHeight);
        }
        if x1 > x2 || y1 > y2 {
            return Err(InvalidRegion::Reversed);
        }
        let (w, h) = (i64::from(space.width), i64::from(space.height));
        if x1 < 0 || y1 < 0 || x2 > w || y2 > h {
            return Err(InvalidRegion::OutOfBounds { x1, y1, x2, y2, space });
        }
        Ok(Self {
            x1: x1 as u32,
            y1: y1 as u32,
            x2: x2 as u32,
            y2: y2 as u32,
            space,
        })
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn x2(&self) -> u32 {
        self.x2
    }
    pub fn y2(&self) -> u32 {
        self.y2
    }
    pub fn space(&self) -> CoordSpace {
        self.space
    }
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Same coordinates, re-homed in `space`. Fails if they do not fit.
    pub fn in_space(&self, space: CoordSpace) -> Result<Self, InvalidRegion> {
        Self::new(
            i64::from(self.x1),
            i64::from(self.y1),
            i64::from(self.x2),
            i64::from(self.y2),
            space,
        )
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn area(b: &BBox) -> u64 {
    b.area()
}

fn same_space(a: CoordSpace, b: CoordSpace) -> Result<(), GeometryError> {
    if a == b {
        Ok(())
    } else {
        Err(GeometryError::SpaceMismatch { a, b })
    }
}

/// Area of the overlap of `a` and `b`; zero when disjoint.
pub fn intersect_area(a: &BBox, b: &BBox) -> Result<u64, GeometryError> {
    same_space(a.space, b.space)?;
    Ok(overlap(a, b))
}

fn overlap(a: &BBox, b: &BBox) -> u64 {
    let w = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1));
    let h = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1));
    u64::from(w) * u64::from(h)
}

/// Turns arbitrary parsed coordinates into a box, clipping into `space`.
///
/// Fractional values are rounded to the nearest pixel before clipping.
pub fn clamp_and_validate(raw: &[f64], space: CoordSpace) -> Result<BBox, InvalidRegion> {
    if raw.len() != 4 {
        return Err(InvalidRegion::WrongArity { got: raw.len() });
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(InvalidRegion::NonFinite { index });
    }
    let clip = |v: f64, hi: u32| -> i64 { v.round().clamp(0.0, f64::from(hi)) as i64 };
    let x1 = clip(raw[0], space.width);
    let y1 = clip(raw[1], space.height);
    let x2 = clip(raw[2], space.width);
    let y2 = clip(raw[3], space.height);
    BBox::new(x1, y1, x2, y2, space)
}

/// Exact `area(region) / area(space)`.
pub fn area_ratio<S: Scalar>(region: &BBox, space: CoordSpace) -> Result<S, GeometryError> {
    same_space(region.space, space)?;
    Ok(S::from_ratio(region.area(), space.area()))
}

/// Maps `b` from `from` pixel coordinates onto `to`, rounding to the nearest
/// pixel (halves round up) and clipping into `to`.
pub fn scale_box(b: &BBox, from: CoordSpace, to: CoordSpace) -> Result<BBox, InvalidRegion> {
    // round(v * t / f) == floor((2 v t + f) / (2 f)) for non-negative integers
    let scale = |v: u32, t: u32, f: u32| -> i64 {
        let (v, t, f) = (u64::from(v), u64::from(t), u64::from(f));
        ((2 * v * t + f) / (2 * f)) as i64
    };
    let raw = [
        scale(b.x1, to.width, from.width) as f64,
        scale(b.y1, to.height, from.height) as f64,
        scale(b.x2, to.width, from.width) as f64,
        scale(b.y2, to.height, from.height) as f64,
    ];
    clamp_and_validate(&raw, to)
}

/// Smallest box containing every box in `boxes`.
pub fn bounding_union(boxes: &[BBox]) -> Result<Option<BBox>, GeometryError> {
    let Some(first) = boxes.first() else {
        return Ok(None);
    };
    let mut out = *first;
    for b in &boxes[1..] {
        same_space(out.space, b.space)?;
        out.x1 = out.x1.min(b.x1);
        out.y1 = out.y1.min(b.y1);
        out.x2 = out.x2.max(b.x2);
        out.y2 = out.y2.max(b.y2);
    }
    Ok(Some(out))
}

/// Mean over ground-truth boxes of the best fraction of each one covered by
/// any single predicted box. No predictions scores zero.
pub fn coverage_score<S: Scalar>(preds: &[BBox], gts: &[BBox]) -> Result<S, GeometryError> {
    let first = gts.first().ok_or(GeometryError::MissingGroundTruth)?;
    for b in gts.iter().chain(preds) {
        same_space(first.space, b.space)?;
    }
    let mut total = S::zero();
    for g in gts {
        let best = preds.iter().map(|p| overlap(p, g)).max().unwrap_or(0);
        total = total + S::from_ratio(best, g.area());
    }
    Ok(total / S::from_int(gts.len() as u64))
}
