//! Scalar abstraction shared by the plain `f64` path and the taped adjoint path.
//!
//! Every routine that must be differentiable (sag, refraction, paraxial trace,
//! losses) is written once against [`Scalar`]; instantiating it with `f64`
//! gives a fast forward evaluation, instantiating it with
//! [`crate::adjoint::Var`] records it on a tape.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::adjoint::CustomAdjoint;

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(value: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powi(self, n: i32) -> Self;

    /// Apply an operation whose adjoint is supplied by hand. The forward
    /// `outputs` are already computed from the input values; a taped scalar
    /// registers `op` so that backward calls it once, the plain `f64` path
    /// ignores it.
    fn custom(inputs: &[Self], outputs: Vec<f64>, op: Box<dyn CustomAdjoint>) -> Vec<Self>;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn tan(self) -> Self {
        self.sin() / self.cos()
    }

    /// `max(self, other)`; ties resolve to `other`, which callers use for the
    /// constant branch of a saturated loss.
    fn max_branch(self, other: Self) -> Self {
        if self.value() > other.value() {
            self
        } else {
            other
        }
    }

    /// `min(self, other)`; ties resolve to `other`.
    fn min_branch(self, other: Self) -> Self {
        if self.value() < other.value() {
            self
        } else {
            other
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(value: f64) -> Self {
        value
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn custom(_inputs: &[Self], outputs: Vec<f64>, _op: Box<dyn CustomAdjoint>) -> Vec<Self> {
        outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn constant(x: f64, y: f64, z: f64) -> Self {
        Self::new(T::constant(x), T::constant(y), T::constant(z))
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn values(self) -> Vec3<f64> {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }

    /// Lift a plain vector into constants of this scalar type.
    pub fn lift(v: Vec3<f64>) -> Self {
        Self::constant(v.x, v.y, v.z)
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_is_orthogonal() {
        let a = Vec3::new(1.0, 2.0, 3.0);
        let b = Vec3::new(-0.5, 0.25, 4.0);
        let c = a.cross(b);
        assert!(c.dot(a).abs() < 1e-12);
        assert!(c.dot(b).abs() < 1e-12);
    }

    #[test]
    fn branch_ties_pick_other() {
        assert_eq!(2.0f64.max_branch(2.0), 2.0);
        assert_eq!(1.0f64.min_branch(3.0), 1.0);
    }
}
