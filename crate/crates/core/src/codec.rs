//! Alignment offsets and the normalized encoding used by offset predictors.
//!
//! Three offsets describe every building: `f` moves the historical label onto
//! the footprint, `o` moves the footprint onto the roof, and `r` moves the
//! label straight onto the roof. They always satisfy `f + o = r`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D displacement in pixel units (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffsetVec {
    pub dx: f64,
    pub dy: f64,
}

impl OffsetVec {
    pub const ZERO: OffsetVec = OffsetVec { dx: 0.0, dy: 0.0 };

    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn norm_squared(self) -> f64 {
        self.dx * self.dx + self.dy * self.dy
    }

    pub fn is_finite(self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }
}

impl Add for OffsetVec {
    type Output = OffsetVec;
    fn add(self, rhs: OffsetVec) -> OffsetVec {
        OffsetVec::new(self.dx + rhs.dx, self.dy + rhs.dy)
    }
}

impl AddAssign for OffsetVec {
    fn add_assign(&mut self, rhs: OffsetVec) {
        self.dx += rhs.dx;
        self.dy += rhs.dy;
    }
}

impl Sub for OffsetVec {
    type Output = OffsetVec;
    fn sub(self, rhs: OffsetVec) -> OffsetVec {
        OffsetVec::new(self.dx - rhs.dx, self.dy - rhs.dy)
    }
}

impl Neg for OffsetVec {
    type Output = OffsetVec;
    fn neg(self) -> OffsetVec {
        OffsetVec::new(-self.dx, -self.dy)
    }
}

impl Mul<f64> for OffsetVec {
    type Output = OffsetVec;
    fn mul(self, k: f64) -> OffsetVec {
        OffsetVec::new(self.dx * k, self.dy * k)
    }
}

impl Div<f64> for OffsetVec {
    type Output = OffsetVec;
    fn div(self, k: f64) -> OffsetVec {
        OffsetVec::new(self.dx / k, self.dy / k)
    }
}

/// Label-to-roof offset from the label-to-footprint and footprint-to-roof
/// offsets.
pub fn compose(f: OffsetVec, o: OffsetVec) -> OffsetVec {
    f + o
}

/// Affine map between pixel offsets and the normalized model space:
/// `encode(v) = (v - alpha) / beta`, `decode(e) = beta * e + alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetCodec {
    pub alpha: OffsetVec,
    pub beta: f64,
}

impl Default for OffsetCodec {
    fn default() -> Self {
        Self {
            alpha: OffsetVec::ZERO,
            beta: 200.0,
        }
    }
}

impl OffsetCodec {
    pub fn new(alpha: OffsetVec, beta: f64) -> Result<Self> {
        let codec = Self { alpha, beta };
        codec.validate()?;
        Ok(codec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "codec beta must be a positive finite number, got {}",
                self.beta
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidParameter("codec alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn encode(&self, v: OffsetVec) -> OffsetVec {
        (v - self.alpha) / self.beta
    }

    pub fn decode(&self, encoded: OffsetVec) -> OffsetVec {
        encoded * self.beta + self.alpha
    }
}
