//! Planar geometry primitives.

use crate::num::Scalar;

/// Point in a projected plane; `x1` is easting, `x2` is northing, both meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2<T> {
    pub x1: T,
    pub x2: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x1: T, x2: T) -> Self {
        Point2 { x1, x2 }
    }

    pub fn dist2(&self, other: &Point2<T>) -> T {
        let dx = self.x1 - other.x1;
        let dy = self.x2 - other.x2;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &Point2<T>) -> T {
        self.dist2(other).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }
}

/// Axis-aligned rectangle, closed on all edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub min: Point2<T>,
    pub max: Point2<T>,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x1_min: T, x2_min: T, x1_max: T, x2_max: T) -> Self {
        Rect {
            min: Point2::new(x1_min, x2_min),
            max: Point2::new(x1_max, x2_max),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min.x1 <= self.max.x1 && self.min.x2 <= self.max.x2
    }

    pub fn width(&self) -> T {
        self.max.x1 - self.min.x1
    }

    pub fn height(&self) -> T {
        self.max.x2 - self.min.x2
    }

    pub fn contains(&self, p: &Point2<T>) -> bool {
        p.x1 >= self.min.x1 && p.x1 <= self.max.x1 && p.x2 >= self.min.x2 && p.x2 <= self.max.x2
    }

    /// Grow the rectangle by `margin` on every side.
    pub fn expanded(&self, margin: T) -> Rect<T> {
        Rect {
            min: Point2::new(self.min.x1 - margin, self.min.x2 - margin),
            max: Point2::new(self.max.x1 + margin, self.max.x2 + margin),
        }
    }

    /// Euclidean distance from `p` to the rectangle (0 when inside).
    pub fn distance_to(&self, p: &Point2<T>) -> T {
        let zero = T::zero();
        let dx = (self.min.x1 - p.x1).max(p.x1 - self.max.x1).max(zero);
        let dy = (self.min.x2 - p.x2).max(p.x2 - self.max.x2).max(zero);
        (dx * dx + dy * dy).sqrt()
    }
}
