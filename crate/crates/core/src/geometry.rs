//! Axis-aligned boxes and small vector helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};

pub type Vec3 = [f64; 3];

/// Axis-aligned 3D box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3) -> Self {
        Self { center, size }
    }

    pub fn from_min_max(min: Vec3, max: Vec3) -> Self {
        let center = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0, (min[2] + max[2]) / 2.0];
        let size = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        Self { center, size }
    }

    /// Tight bounds of a point set (xyz are the first three entries of each point).
    pub fn bounding<P: AsRef<[f64]>>(points: &[P]) -> Option<Self> {
        let first = points.first()?.as_ref();
        let mut min = [first[0], first[1], first[2]];
        let mut max = min;
        for p in points {
            let p = p.as_ref();
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Some(Self::from_min_max(min, max))
    }

    pub fn min(&self) -> Vec3 {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    pub fn max(&self) -> Vec3 {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] - 1e-12 && p[a] <= hi[a] + 1e-12)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().all(|&s| s > 0.0 && s.is_finite()) && self.center.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(SatError::Argument(format!("box sizes must be positive and finite, got {:?}", self.size)))
        }
    }
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}
