//! Axis-aligned box geometry, generic over the coordinate scalar.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Scalar usable for box coordinates and precision/recall arithmetic.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + Debug + Default + Send + Sync + 'static {}

// Length of the overlap of [a, a+aw) and [b, b+bw). Nested intervals return
// the inner extent exactly so a box intersected with itself has its own area.
fn overlap<T: Scalar>(a: T, aw: T, b: T, bw: T) -> T {
    let (ae, be) = (a + aw, b + bw);
    if a >= b && ae <= be {
        aw
    } else if b >= a && be <= ae {
        bw
    } else {
        ae.min(be) - a.max(b)
    }
}

/// COCO `[x, y, w, h]` box: top-left corner plus extent.
///
/// Serialized as a four-element array. Validity (`w > 0`, `h > 0`, all
/// finite) is checked by [`BBox::is_valid`] rather than enforced by the
/// constructor so that invalid input can be reported instead of rejected.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct BBox<T = f64> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> From<[T; 4]> for BBox<T> {
    fn from([x, y, w, h]: [T; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl<T: Scalar> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_xyxy(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn xyxy(&self) -> [T; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > T::zero()
            && self.h > T::zero()
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = overlap(self.x, self.w, other.x, other.w);
        let ih = overlap(self.y, self.h, other.y, other.h);
        if iw <= T::zero() || ih <= T::zero() {
            return T::zero();
        }
        iw * ih
    }

    pub fn iou(&self, other: &Self) -> T {
        iou(self, other)
    }

    pub fn cast<U: Scalar>(&self) -> Option<BBox<U>> {
        Some(BBox {
            x: U::from(self.x)?,
            y: U::from(self.y)?,
            w: U::from(self.w)?,
            h: U::from(self.h)?,
        })
    }
}

/// Intersection over union. Zero for disjoint boxes; clamped to `[0, 1]`
/// against rounding.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one()).max(T::zero())
}
