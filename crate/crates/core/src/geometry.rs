//! Rotationally symmetric surface shapes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::materials::Material;
use crate::math::{Scalar, Vec3};
use crate::system::ParamKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("sag undefined at r² = {r2} mm² (1 - (1+k)c²r² = {arg})")]
    SagDomain { r2: f64, arg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceKind {
    StandardConic,
    EvenAsphere,
}

/// The differentiable part of a surface: base curvature, conic constant and
/// even aspheric coefficients `a_1..a_8` multiplying `r^2 .. r^16`.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceShape<T> {
    pub curvature: T,
    pub conic: T,
    pub asphere: [T; 8],
    /// False when every coefficient is a literal zero, letting the polynomial
    /// be skipped entirely.
    pub has_asphere: bool,
}

impl<T: Scalar> SurfaceShape<T> {
    pub fn sphere(curvature: f64) -> Self {
        SurfaceShape {
            curvature: T::constant(curvature),
            conic: T::zero(),
            asphere: [T::zero(); 8],
            has_asphere: false,
        }
    }

    pub fn values(&self) -> SurfaceShape<f64> {
        SurfaceShape {
            curvature: self.curvature.value(),
            conic: self.conic.value(),
            asphere: self.asphere.map(Scalar::value),
            has_asphere: self.has_asphere,
        }
    }

    fn root_arg(&self, r2: T) -> Result<T, GeometryError> {
        let c = self.curvature;
        let arg = T::constant(1.0) - (self.conic + 1.0) * c * c * r2;
        if arg.value() <= 0.0 {
            return Err(GeometryError::SagDomain {
                r2: r2.value(),
                arg: arg.value(),
            });
        }
        Ok(arg)
    }

    /// `z(r²) = c r² / (1 + √(1 − (1+k) c² r²)) + Σ a_i r^{2i}`.
    pub fn sag(&self, r2: T) -> Result<T, GeometryError> {
        let arg = self.root_arg(r2)?;
        let mut z = self.curvature * r2 / (arg.sqrt() + 1.0);
        if self.has_asphere {
            let mut p = self.asphere[7];
            for a in self.asphere[..7].iter().rev() {
                p = p * r2 + *a;
            }
            z = z + p * r2;
        }
        Ok(z)
    }

    /// `dz/d(r²)`.
    pub fn sag_slope(&self, r2: T) -> Result<T, GeometryError> {
        let arg = self.root_arg(r2)?;
        let mut s = self.curvature / (arg.sqrt() * 2.0);
        if self.has_asphere {
            let mut p = self.asphere[7] * 8.0;
            for (i, a) in self.asphere[..7].iter().enumerate().rev() {
                p = p * r2 + *a * (i + 1) as f64;
            }
            s = s + p;
        }
        Ok(s)
    }

    /// Implicit form `F(x, y, z) = z − sag(x² + y²)`.
    pub fn implicit(&self, p: Vec3<T>) -> Result<T, GeometryError> {
        Ok(p.z - self.sag(p.x * p.x + p.y * p.y)?)
    }

    /// `∇F`; normalising it gives the surface normal pointing towards +z.
    pub fn gradient(&self, p: Vec3<T>) -> Result<Vec3<T>, GeometryError> {
        let s = self.sag_slope(p.x * p.x + p.y * p.y)? * -2.0;
        Ok(Vec3::new(p.x * s, p.y * s, T::constant(1.0)))
    }
}

/// One prescription surface. The medium behind it (towards the image) is
/// `material`; `thickness` is the axial distance to the next surface, or to
/// the image plane for the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub kind: SurfaceKind,
    pub curvature: f64,
    pub conic: f64,
    pub asphere: [f64; 8],
    pub thickness: f64,
    pub semi_aperture: f64,
    pub material: Material,
    pub stop: bool,
    /// Parameters the optimizer may move.
    pub trainable: Vec<ParamKind>,
}

impl Surface {
    pub fn standard(curvature: f64, thickness: f64, semi_aperture: f64, material: Material) -> Self {
        Surface {
            kind: SurfaceKind::StandardConic,
            curvature,
            conic: 0.0,
            asphere: [0.0; 8],
            thickness,
            semi_aperture,
            material,
            stop: false,
            trainable: Vec::new(),
        }
    }

    pub fn shape(&self) -> SurfaceShape<f64> {
        SurfaceShape {
            curvature: self.curvature,
            conic: self.conic,
            asphere: self.asphere,
            has_asphere: self.kind == SurfaceKind::EvenAsphere,
        }
    }

    /// Whether the sag is real across the clear aperture.
    pub fn check_aperture(&self) -> Result<(), GeometryError> {
        let r2 = self.semi_aperture * self.semi_aperture;
        self.shape().sag(r2).map(|_| ())
    }
}

/// Points on a surface inside its aperture, used to seed intersection
/// searches. Coordinates are surface-local (vertex at the origin).
#[derive(Debug, Clone)]
pub struct ReferencePointSet {
    pub surface: usize,
    pub radii: usize,
    pub azimuths: usize,
    pub points: Vec<Vec3<f64>>,
}

pub const DEFAULT_REFERENCE_RADII: usize = 16;
pub const DEFAULT_REFERENCE_AZIMUTHS: usize = 16;

/// Polar grid of `radii × azimuths` points plus the apex. Radii are uniform in
/// `(0, semi_aperture]`, azimuths uniform in `[0, 2π)`.
pub fn build_reference_points(
    surface_id: usize,
    shape: &SurfaceShape<f64>,
    semi_aperture: f64,
    radii: usize,
    azimuths: usize,
) -> Result<ReferencePointSet, GeometryError> {
    let mut points = Vec::with_capacity(radii * azimuths + 1);
    points.push(Vec3::new(0.0, 0.0, shape.sag(0.0)?));
    for i in 1..=radii {
        let r = semi_aperture * i as f64 / radii as f64;
        let z = shape.sag(r * r)?;
        for j in 0..azimuths {
            let th = std::f64::consts::TAU * j as f64 / azimuths as f64;
            points.push(Vec3::new(r * th.cos(), r * th.sin(), z));
        }
    }
    Ok(ReferencePointSet {
        surface: surface_id,
        radii,
        azimuths,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asphere(c: f64, k: f64, a: [f64; 8]) -> SurfaceShape<f64> {
        SurfaceShape {
            curvature: c,
            conic: k,
            asphere: a,
            has_asphere: true,
        }
    }

    #[test]
    fn plane_has_zero_sag() {
        let s = SurfaceShape::<f64>::sphere(0.0);
        assert_eq!(s.sag(4.0).unwrap(), 0.0);
    }

    #[test]
    fn sphere_sag_closed_form() {
        // 0.1 / (1 + sqrt(0.99)) to 16 digits
        let s = SurfaceShape::<f64>::sphere(0.1);
        assert!((s.sag(1.0).unwrap() - 0.050_125_628_933_800_455).abs() < 1e-15);
    }

    #[test]
    fn pure_quartic_term() {
        let mut a = [0.0; 8];
        a[1] = 0.01;
        assert!((asphere(0.0, 0.0, a).sag(2.0).unwrap() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn domain_error_past_hemisphere() {
        let s = SurfaceShape::<f64>::sphere(0.5);
        assert!(matches!(s.sag(4.5), Err(GeometryError::SagDomain { .. })));
    }

    #[test]
    fn gradient_axial() {
        let plane = SurfaceShape::<f64>::sphere(0.0);
        assert_eq!(
            plane.gradient(Vec3::new(0.3, -0.2, 0.0)).unwrap(),
            Vec3::new(0.0, 0.0, 1.0)
        );
        let sph = SurfaceShape::<f64>::sphere(0.5);
        assert_eq!(sph.gradient(Vec3::new(0.0, 0.0, 0.0)).unwrap(), Vec3::new(0.0, 0.0, 1.0));
    }

    fn fd_gradient(s: &SurfaceShape<f64>, p: Vec3<f64>, h: f64) -> Vec3<f64> {
        let f = |q: Vec3<f64>| s.implicit(q).unwrap();
        let d = |e: Vec3<f64>| (f(p + e) - f(p - e)) / (2.0 * h);
        Vec3::new(
            d(Vec3::new(h, 0.0, 0.0)),
            d(Vec3::new(0.0, h, 0.0)),
            d(Vec3::new(0.0, 0.0, h)),
        )
    }

    #[test]
    fn sphere_gradient_matches_finite_difference() {
        let s = SurfaceShape::<f64>::sphere(0.1);
        let p = Vec3::new(1.0, 0.0, s.sag(1.0).unwrap());
        let g = s.gradient(p).unwrap();
        let fd = fd_gradient(&s, p, 1e-5);
        assert!((g - fd).norm() < 1e-9, "{g:?} vs {fd:?}");
    }

    #[test]
    fn reference_points_on_plane() {
        let refs =
            build_reference_points(0, &SurfaceShape::sphere(0.0), 2.0, 4, 4).unwrap();
        assert_eq!(refs.points.len(), 17);
        assert!(refs.points.iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn reference_points_stay_inside_aperture() {
        // gull-wing asphere whose sag turns over just outside r = 1.8
        let s = asphere(0.25, -3.0, [0.0, -0.02, 0.004, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let refs = build_reference_points(0, &s, 1.8, 16, 16).unwrap();
        assert_eq!(refs.points.len(), 257);
        for p in &refs.points {
            let r2 = p.x * p.x + p.y * p.y;
            assert!(r2.sqrt() <= 1.8 + 1e-12);
            assert!((p.z - s.sag(r2).unwrap()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_difference(
            c in -0.3f64..0.3,
            k in -3.0f64..1.0,
            a2 in -1e-3f64..1e-3,
            a3 in -1e-4f64..1e-4,
            r in 0.0f64..1.5,
            th in 0.0f64..std::f64::consts::TAU,
        ) {
            let s = asphere(c, k, [0.0, a2, a3, 0.0, 0.0, 0.0, 0.0, 0.0]);
            let (x, y) = (r * th.cos(), r * th.sin());
            let p = Vec3::new(x, y, s.sag(x * x + y * y).unwrap());
            let g = s.gradient(p).unwrap();
            let fd = fd_gradient(&s, p, 1e-6);
            prop_assert!((g - fd).norm() <= 1e-6 * g.norm());
        }

        #[test]
        fn sag_is_point_symmetric(
            c in -0.3f64..0.3,
            a2 in -1e-3f64..1e-3,
            x in -1.5f64..1.5,
            y in -1.5f64..1.5,
        ) {
            let s = asphere(c, 0.0, [0.0, a2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            let p = s.sag(x * x + y * y).unwrap();
            let m = s.sag((-x) * (-x) + (-y) * (-y)).unwrap();
            prop_assert_eq!(p, m);
        }
    }
}
