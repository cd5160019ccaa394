//! Sequential exact ray tracing.
//!
//! Intersections are solved with Newton's method in plain `f64`, seeded either
//! from the reference point closest in angle to the ray or from the vertex
//! tangent plane. The converged root is then pushed through one more Newton
//! step in the generic scalar type, which makes the returned path length an
//! exact first-order function of the lens parameters without recording the
//! iterations themselves. Chief-ray aiming uses the same device in two
//! dimensions.
//!
//! Everything that only shapes the sampling (entrance pupil, vignetting
//! ellipse, ray start plane, reference points) lives in [`TraceContext`] and is
//! frozen for the lifetime of one evaluation.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adjoint::Tape;
use crate::geometry::{
    build_reference_points, GeometryError, ReferencePointSet, SurfaceShape,
    DEFAULT_REFERENCE_AZIMUTHS, DEFAULT_REFERENCE_RADII,
};
use crate::math::{Scalar, Vec3};
use crate::system::{EntrancePupil, LensSystem, SystemError, SystemParams};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITERS: u32 = 50;
const GRAZING: f64 = 1e-14;
const VIGNETTING_PROBES: usize = 32;
const VIGNETTING_MIN_SURVIVORS: usize = 8;
const VIGNETTING_MARGIN: f64 = 0.99;
const AIM_TOL: f64 = 1e-8;
const AIM_MAX_ITERS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FailureReason {
    NoIntersection,
    ApertureClip,
    TotalInternalReflection,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::NoIntersection => "no_intersection",
            FailureReason::ApertureClip => "aperture_clip",
            FailureReason::TotalInternalReflection => "tir",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("field {field}° is fully vignetted ({survivors} of {probes} probes survive)")]
    FullyVignetted {
        field: f64,
        survivors: usize,
        probes: usize,
    },
    #[error("every ray of the bundle at field {field}° failed")]
    BundleExtinct { field: f64 },
    #[error("chief ray aiming failed at field {field}°: {reason}")]
    Aiming { field: f64, reason: String },
    #[error("pupil grid side must be at least 3, got {0}")]
    GridTooSmall(usize),
}

/// Object-space field direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldSpec {
    /// Half angle to the axis, degrees.
    pub angle: f64,
    /// Degrees; 0 keeps the field in the y–z plane.
    pub azimuth: f64,
}

impl FieldSpec {
    pub fn meridional(angle: f64) -> Self {
        FieldSpec {
            angle,
            azimuth: 0.0,
        }
    }

    pub fn direction(&self) -> Vec3<f64> {
        let (v, az) = (self.angle.to_radians(), self.azimuth.to_radians());
        Vec3::new(v.sin() * az.sin(), v.sin() * az.cos(), v.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
    pub opl: T,
    pub amplitude: f64,
    pub wavelength: f64,
    pub failure: Option<FailureReason>,
}

impl<T: Scalar> Ray<T> {
    pub fn valid(&self) -> bool {
        self.failure.is_none()
    }

    fn fail(mut self, reason: FailureReason) -> Self {
        self.failure = Some(reason);
        self.amplitude = 0.0;
        self
    }

    pub fn values(&self) -> Ray<f64> {
        Ray {
            origin: self.origin.values(),
            direction: self.direction.values(),
            opl: self.opl.value(),
            amplitude: self.amplitude,
            wavelength: self.wavelength,
            failure: self.failure,
        }
    }
}

/// Usable pupil region: `(px, py)` on the unit disk maps to
/// `(cx + sx·px, cy + sy·py)` in entrance-pupil units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VignettingEllipse {
    pub center: [f64; 2],
    pub scale: [f64; 2],
}

impl VignettingEllipse {
    pub const NONE: VignettingEllipse = VignettingEllipse {
        center: [0.0, 0.0],
        scale: [1.0, 1.0],
    };

    pub fn map(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.center[0] + self.scale[0] * p[0],
            self.center[1] + self.scale[1] * p[1],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialGuess {
    /// Reference point closest in angle to the ray.
    #[default]
    ReferencePoints,
    /// Intersection with the plane tangent at the vertex.
    TangentPlane,
}

#[derive(Debug, Clone)]
pub struct RayBundle<T> {
    pub field: FieldSpec,
    pub ellipse: VignettingEllipse,
    /// Entrance-pupil coordinates of each sample (after the ellipse mapping).
    pub pupil: Vec<[f64; 2]>,
    pub wavelengths: Vec<f64>,
    /// `rays[w][i]` is sample `i` at wavelength `w`.
    pub rays: Vec<Vec<Ray<T>>>,
}

impl<T: Scalar> RayBundle<T> {
    pub fn valid_count(&self) -> usize {
        self.rays.iter().flatten().filter(|r| r.valid()).count()
    }
}

/// Newton outcome for one surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub t: f64,
    pub iterations: u32,
}

/// Non-differentiable data frozen for one evaluation of a system.
#[derive(Debug, Clone)]
pub struct TraceContext {
    pub pupil: EntrancePupil,
    pub refs: Vec<ReferencePointSet>,
    pub semi_apertures: Vec<f64>,
    pub wavelengths: Vec<f64>,
    pub reference: usize,
    /// `media[w][j]`: index behind surface `j` at wavelength `w`.
    pub media: Vec<Vec<f64>>,
    pub stop: usize,
    /// Sign of the paraxial stop height per unit entrance-pupil height.
    stop_sign: f64,
    /// Ray start planes must stay in front of this axial position.
    z_limit: f64,
    pub guess: InitialGuess,
}

impl TraceContext {
    pub fn new(system: &LensSystem) -> Result<Self, TraceError> {
        system.validate()?;
        let pupil = system.entrance_pupil()?;
        let p = system.params();
        let mut refs = Vec::with_capacity(system.surfaces.len());
        let mut min_sag: f64 = 0.0;
        for (i, s) in system.surfaces.iter().enumerate() {
            let r = build_reference_points(
                i,
                &p.shapes[i],
                s.semi_aperture,
                DEFAULT_REFERENCE_RADII,
                DEFAULT_REFERENCE_AZIMUTHS,
            )?;
            if i == 0 {
                min_sag = r.points.iter().fold(0.0, |m, q| m.min(q.z));
            }
            refs.push(r);
        }
        let media = system
            .wavelengths
            .iter()
            .map(|&w| system.media(w))
            .collect::<Result<Vec<_>, _>>()?;
        let stop = system.stop_index();
        let n_ref = &media[system.reference];
        let mut y = 1.0;
        let mut w = 0.0;
        let mut n_prev = 1.0;
        for j in 0..stop {
            w -= y * p.shapes[j].curvature * (n_ref[j] - n_prev);
            y += p.thickness[j] * w / n_ref[j];
            n_prev = n_ref[j];
        }
        Ok(TraceContext {
            pupil,
            refs,
            semi_apertures: system.surfaces.iter().map(|s| s.semi_aperture).collect(),
            wavelengths: system.wavelengths.clone(),
            reference: system.reference,
            media,
            stop,
            stop_sign: if y < 0.0 { -1.0 } else { 1.0 },
            z_limit: min_sag - 0.5 * pupil.radius,
            guess: InitialGuess::ReferencePoints,
        })
    }

    /// Axial position of the start plane for `field`: far enough forward that
    /// every ray aimed at the (possibly shifted) pupil starts in front of the
    /// first surface.
    fn start_z(&self, field: &FieldSpec) -> f64 {
        let v = field.angle.to_radians();
        let (s, c) = (v.sin().abs(), v.cos());
        let r = self.pupil.radius;
        let fit = (self.z_limit - self.pupil.z * s * s - 2.0 * r * s * c) / (c * c);
        fit.min(-2.0 * r)
    }

    /// Ray of wavelength index `w` through entrance-pupil point `pupil`,
    /// starting on the tilted wavefront plane of `field`.
    pub fn launch<T: Scalar>(&self, field: &FieldSpec, pupil: [T; 2], w: usize) -> Ray<T> {
        let d = field.direction();
        let r = self.pupil.radius;
        let p = Vec3::new(pupil[0] * r, pupil[1] * r, T::constant(self.pupil.z));
        let q = Vec3::constant(0.0, 0.0, self.start_z(field));
        let dt = Vec3::lift(d);
        let origin = p - dt.scale((p - q).dot(dt));
        Ray {
            origin,
            direction: dt,
            opl: T::zero(),
            amplitude: 1.0,
            wavelength: self.wavelengths[w],
            failure: None,
        }
    }

    fn start_guess(&self, j: usize, o: Vec3<f64>, d: Vec3<f64>) -> Option<f64> {
        match self.guess {
            InitialGuess::ReferencePoints => initial_guess(o, d, &self.refs[j]).map(|(_, t)| t),
            InitialGuess::TangentPlane => tangent_plane_guess(o, d),
        }
    }

    /// Trace `ray` through surfaces `0..end` (refracting at each), then to the
    /// image plane when `end` equals the surface count and `to_image` is set.
    /// Aperture checks are skipped when `clip` is false.
    pub fn trace_ray<T: Scalar>(
        &self,
        p: &SystemParams<T>,
        ray: Ray<T>,
        w: usize,
        end: usize,
        clip: bool,
        to_image: bool,
    ) -> Ray<T> {
        let media = &self.media[w];
        let mut ray = ray;
        let mut n_prev = 1.0;
        for j in 0..end {
            let vz = p.vertex_z[j];
            let o = Vec3::new(ray.origin.x, ray.origin.y, ray.origin.z - vz);
            let d = ray.direction;
            let (ov, dv) = (o.values(), d.values());
            let shape = &p.shapes[j];
            let sv = shape.values();
            let Some(t0) = self.start_guess(j, ov, dv) else {
                return ray.fail(FailureReason::NoIntersection);
            };
            let Ok(hit) = newton_intersect(&sv, ov, dv, t0) else {
                return ray.fail(FailureReason::NoIntersection);
            };
            let Some((t, local, normal)) = implicit_step(shape, o, d, hit.t) else {
                return ray.fail(FailureReason::NoIntersection);
            };
            if t.value() < -1e-9 {
                return ray.fail(FailureReason::NoIntersection);
            }
            let lv = local.values();
            if clip && lv.x * lv.x + lv.y * lv.y > self.semi_apertures[j] * self.semi_apertures[j] {
                return ray.fail(FailureReason::ApertureClip);
            }
            ray.opl = ray.opl + t * n_prev;
            ray.origin = Vec3::new(local.x, local.y, local.z + vz);
            if media[j] != n_prev {
                match refract(d, normal, n_prev, media[j]) {
                    Ok(nd) => ray.direction = nd,
                    Err(r) => return ray.fail(r),
                }
            }
            n_prev = media[j];
        }
        if to_image && end == p.shapes.len() {
            let dz = ray.direction.z;
            if dz.value() <= GRAZING {
                return ray.fail(FailureReason::NoIntersection);
            }
            let t = (p.image_z() - ray.origin.z) / dz;
            if t.value() < -1e-9 {
                return ray.fail(FailureReason::NoIntersection);
            }
            ray.opl = ray.opl + t * n_prev;
            ray.origin = ray.origin + ray.direction.scale(t);
        }
        ray
    }

    pub fn trace_to_image<T: Scalar>(&self, p: &SystemParams<T>, ray: Ray<T>, w: usize) -> Ray<T> {
        self.trace_ray(p, ray, w, p.shapes.len(), true, true)
    }

    /// Probe the pupil and fit the axis-aligned ellipse of surviving rays.
    pub fn estimate_vignetting(
        &self,
        p: &SystemParams<f64>,
        field: &FieldSpec,
    ) -> Result<VignettingEllipse, TraceError> {
        let n = VIGNETTING_PROBES;
        let step = 2.0 / n as f64;
        let coord = |i: usize| cell_center(i, n);
        let passes = |x: f64, y: f64| {
            let r = self.launch(field, [x, y], self.reference);
            self.trace_to_image(p, r, self.reference).valid()
        };
        let survivors: Vec<[f64; 2]> = (0..n * n)
            .into_par_iter()
            .filter_map(|k| {
                let (x, y) = (coord(k % n), coord(k / n));
                passes(x, y).then_some([x, y])
            })
            .collect();
        if survivors.len() < VIGNETTING_MIN_SURVIVORS {
            return Err(TraceError::FullyVignetted {
                field: field.angle,
                survivors: survivors.len(),
                probes: n * n,
            });
        }
        let mut extent = [[0.0; 2]; 2];
        for axis in 0..2 {
            let other = 1 - axis;
            let lo = survivors.iter().map(|s| s[other]).fold(f64::INFINITY, f64::min);
            let hi = survivors.iter().map(|s| s[other]).fold(f64::NEG_INFINITY, f64::max);
            let mid = 0.5 * (lo + hi);
            for (side, sign) in [(0, -1.0), (1, 1.0)] {
                // outermost survivor along this direction; ties go to the row
                // nearest the middle of the surviving band, then to the lower
                // row, so mirrored pupils refine identically
                let best = survivors
                    .iter()
                    .copied()
                    .max_by(|a, b| {
                        (sign * a[axis])
                            .total_cmp(&(sign * b[axis]))
                            .then((b[other] - mid).abs().total_cmp(&(a[other] - mid).abs()))
                            .then(b[other].total_cmp(&a[other]))
                    })
                    .expect("survivors checked non-empty");
                let at = |t: f64| {
                    let mut q = best;
                    q[axis] = t;
                    passes(q[0], q[1])
                };
                let mut inside = best[axis];
                let mut outside = inside + sign * step;
                if at(outside) {
                    inside = outside;
                } else {
                    for _ in 0..12 {
                        let m = 0.5 * (inside + outside);
                        if at(m) {
                            inside = m;
                        } else {
                            outside = m;
                        }
                    }
                }
                extent[axis][side] = inside;
            }
        }
        let center = [
            0.5 * (extent[0][0] + extent[0][1]),
            0.5 * (extent[1][0] + extent[1][1]),
        ];
        let scale = [
            VIGNETTING_MARGIN * 0.5 * (extent[0][1] - extent[0][0]),
            VIGNETTING_MARGIN * 0.5 * (extent[1][1] - extent[1][0]),
        ];
        Ok(VignettingEllipse { center, scale })
    }

    /// Trace a plain-valued bundle, rays in parallel.
    pub fn trace_bundle(
        &self,
        p: &SystemParams<f64>,
        field: &FieldSpec,
        ellipse: VignettingEllipse,
        pupil: Vec<[f64; 2]>,
    ) -> Result<RayBundle<f64>, TraceError> {
        let rays: Vec<Vec<Ray<f64>>> = (0..self.wavelengths.len())
            .map(|w| {
                pupil
                    .par_iter()
                    .map(|&q| self.trace_to_image(p, self.launch(field, q, w), w))
                    .collect()
            })
            .collect();
        self.finish_bundle(field, ellipse, pupil, rays)
    }

    /// Trace a bundle with any scalar type, sequentially.
    pub fn trace_bundle_with<T: Scalar>(
        &self,
        p: &SystemParams<T>,
        field: &FieldSpec,
        ellipse: VignettingEllipse,
        pupil: Vec<[f64; 2]>,
    ) -> Result<RayBundle<T>, TraceError> {
        let rays: Vec<Vec<Ray<T>>> = (0..self.wavelengths.len())
            .map(|w| {
                pupil
                    .iter()
                    .map(|q| {
                        let q = [T::constant(q[0]), T::constant(q[1])];
                        self.trace_to_image(p, self.launch(field, q, w), w)
                    })
                    .collect()
            })
            .collect();
        self.finish_bundle(field, ellipse, pupil, rays)
    }

    fn finish_bundle<T: Scalar>(
        &self,
        field: &FieldSpec,
        ellipse: VignettingEllipse,
        pupil: Vec<[f64; 2]>,
        rays: Vec<Vec<Ray<T>>>,
    ) -> Result<RayBundle<T>, TraceError> {
        let bundle = RayBundle {
            field: *field,
            ellipse,
            pupil,
            wavelengths: self.wavelengths.clone(),
            rays,
        };
        if bundle.valid_count() == 0 {
            return Err(TraceError::BundleExtinct { field: field.angle });
        }
        Ok(bundle)
    }

    /// Chief ray of wavelength index `w`: aimed in `f64` so that it crosses
    /// the stop surface on the axis, then traced to the image plane. With a
    /// taped scalar the aim is carried to first order through one implicit
    /// Newton step, so the result differentiates as if aiming were exact.
    pub fn chief_ray<T: Scalar>(
        &self,
        p: &SystemParams<T>,
        field: &FieldSpec,
        w: usize,
    ) -> Result<Ray<T>, TraceError> {
        let pv = p.values();
        let u = self.aim_chief(&pv, field, w)?;
        let jac = self.stop_jacobian(&pv, field, w, u);
        let s = self.stop_hit(p, field, w, [T::constant(u[0]), T::constant(u[1])]);
        let Some(s) = s else {
            return Err(self.aim_error(field, "chief ray lost at the stop"));
        };
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            return Err(self.aim_error(field, "singular stop Jacobian"));
        }
        let ux = T::constant(u[0]) - (s[0] * jac[1][1] - s[1] * jac[0][1]) / det;
        let uy = T::constant(u[1]) - (s[1] * jac[0][0] - s[0] * jac[1][0]) / det;
        let ray = self.launch(field, [ux, uy], w);
        let ray = self.trace_ray(p, ray, w, p.shapes.len(), false, true);
        if !ray.valid() {
            return Err(self.aim_error(field, "chief ray failed after the stop"));
        }
        Ok(ray)
    }

    fn aim_error(&self, field: &FieldSpec, reason: &str) -> TraceError {
        TraceError::Aiming {
            field: field.angle,
            reason: reason.to_string(),
        }
    }

    /// Local `(x, y)` where the ray through pupil point `u` meets the stop.
    fn stop_hit<T: Scalar>(
        &self,
        p: &SystemParams<T>,
        field: &FieldSpec,
        w: usize,
        u: [T; 2],
    ) -> Option<[T; 2]> {
        let ray = self.launch(field, u, w);
        let ray = self.trace_ray(p, ray, w, self.stop, false, false);
        if !ray.valid() {
            return None;
        }
        // intersect the stop itself without refracting
        let vz = p.vertex_z[self.stop];
        let o = Vec3::new(ray.origin.x, ray.origin.y, ray.origin.z - vz);
        let (ov, dv) = (o.values(), ray.direction.values());
        let t0 = self.start_guess(self.stop, ov, dv)?;
        let hit = newton_intersect(&p.shapes[self.stop].values(), ov, dv, t0).ok()?;
        let (_, local, _) = implicit_step(&p.shapes[self.stop], o, ray.direction, hit.t)?;
        Some([local.x, local.y])
    }

    /// Exact `∂(stop x, y)/∂(pupil x, y)` from a throwaway tape.
    fn stop_jacobian(
        &self,
        p: &SystemParams<f64>,
        field: &FieldSpec,
        w: usize,
        u: [f64; 2],
    ) -> [[f64; 2]; 2] {
        let tape = Tape::new();
        let pl = p.lift();
        let (ux, uy) = (tape.var(u[0]), tape.var(u[1]));
        let Some(s) = self.stop_hit(&pl, field, w, [ux, uy]) else {
            return [[0.0; 2]; 2];
        };
        let mut jac = [[0.0; 2]; 2];
        for (row, si) in s.iter().enumerate() {
            if let Ok(g) = tape.backward(*si) {
                jac[row] = [g.wrt(ux), g.wrt(uy)];
            }
        }
        jac
    }

    /// Pupil coordinates of the chief ray by 2-D secant (Broyden) iteration.
    pub fn aim_chief(
        &self,
        p: &SystemParams<f64>,
        field: &FieldSpec,
        w: usize,
    ) -> Result<[f64; 2], TraceError> {
        let lost = || self.aim_error(field, "aiming ray lost before the stop");
        let mut u = [0.0, 0.0];
        let mut s = self.stop_hit(p, field, w, u).ok_or_else(lost)?;
        // paraxial slope of stop height against pupil height
        let g0 = self.stop_sign * self.semi_apertures[self.stop];
        let mut b = [[g0, 0.0], [0.0, g0]];
        let target = AIM_TOL * 1e-4;
        for _ in 0..AIM_MAX_ITERS {
            if s[0].hypot(s[1]) < target {
                return Ok(u);
            }
            let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
            if det.abs() < 1e-300 {
                break;
            }
            let du = [
                -(s[0] * b[1][1] - s[1] * b[0][1]) / det,
                -(s[1] * b[0][0] - s[0] * b[1][0]) / det,
            ];
            let un = [u[0] + du[0], u[1] + du[1]];
            let Some(sn) = self.stop_hit(p, field, w, un) else {
                break;
            };
            let ds = [sn[0] - s[0], sn[1] - s[1]];
            let dd = du[0] * du[0] + du[1] * du[1];
            if dd == 0.0 {
                u = un;
                s = sn;
                break;
            }
            // Broyden rank-one update
            for r in 0..2 {
                let resid = ds[r] - (b[r][0] * du[0] + b[r][1] * du[1]);
                b[r][0] += resid * du[0] / dd;
                b[r][1] += resid * du[1] / dd;
            }
            u = un;
            s = sn;
        }
        if s[0].hypot(s[1]) < AIM_TOL {
            Ok(u)
        } else {
            Err(self.aim_error(field, "no convergence"))
        }
    }
}

impl<T: Scalar> SystemParams<T> {
    pub fn values(&self) -> SystemParams<f64> {
        SystemParams {
            shapes: self.shapes.iter().map(|s| s.values()).collect(),
            thickness: self.thickness.iter().map(|d| d.value()).collect(),
            vertex_z: self.vertex_z.iter().map(|z| z.value()).collect(),
        }
    }
}

/// Centre of cell `i` of `n` across `[-1, 1]`, exactly antisymmetric in `i`.
pub fn cell_center(i: usize, n: usize) -> f64 {
    (2 * i as i64 + 1 - n as i64) as f64 / n as f64
}

/// Cell-centred `n × n` grid over the unit square, keeping the nodes inside
/// the unit disk, mapped through `ellipse`.
pub fn sample_pupil(n: usize, ellipse: &VignettingEllipse) -> Result<Vec<[f64; 2]>, TraceError> {
    if n < 3 {
        return Err(TraceError::GridTooSmall(n));
    }
    let coord = |i: usize| cell_center(i, n);
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (coord(i), coord(j));
            if x * x + y * y <= 1.0 {
                out.push(ellipse.map([x, y]));
            }
        }
    }
    Ok(out)
}

/// Reference point minimising `|(P_s − P_r) × D| / ((P_s − P_r)·D)` over
/// points ahead of the ray; returns it and its along-ray distance.
pub fn initial_guess(
    origin: Vec3<f64>,
    dir: Vec3<f64>,
    refs: &ReferencePointSet,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, &ps) in refs.points.iter().enumerate() {
        let v = ps - origin;
        let along = v.dot(dir);
        if along <= 0.0 {
            continue;
        }
        let ratio = v.cross(dir).norm() / along;
        if best.is_none_or(|(_, r, _)| ratio < r) {
            best = Some((i, ratio, along));
        }
    }
    best.map(|(i, _, t)| (i, t))
}

/// Along-ray distance to the vertex tangent plane `z = 0`.
pub fn tangent_plane_guess(origin: Vec3<f64>, dir: Vec3<f64>) -> Option<f64> {
    if dir.z.abs() < GRAZING {
        return None;
    }
    Some(-origin.z / dir.z)
}

/// Newton iteration on `F(P_r + t D) = 0` from `t0`.
pub fn newton_intersect(
    shape: &SurfaceShape<f64>,
    origin: Vec3<f64>,
    dir: Vec3<f64>,
    t0: f64,
) -> Result<Intersection, FailureReason> {
    let mut t = t0;
    for it in 1..=NEWTON_MAX_ITERS {
        let p = origin + dir.scale(t);
        let f = shape.implicit(p).map_err(|_| FailureReason::NoIntersection)?;
        if f.abs() < NEWTON_TOL {
            return Ok(Intersection { t, iterations: it });
        }
        let g = shape
            .gradient(p)
            .map_err(|_| FailureReason::NoIntersection)?
            .dot(dir);
        if g.abs() < GRAZING {
            return Err(FailureReason::NoIntersection);
        }
        t -= f / g;
        if !t.is_finite() {
            break;
        }
    }
    Err(FailureReason::NoIntersection)
}

/// One Newton step from the converged root in the generic scalar type.
/// Returns the path length, the local hit point and the unit normal there.
fn implicit_step<T: Scalar>(
    shape: &SurfaceShape<T>,
    origin: Vec3<T>,
    dir: Vec3<T>,
    t_root: f64,
) -> Option<(T, Vec3<T>, Vec3<T>)> {
    let p0 = origin + dir.scale(T::constant(t_root));
    let f = shape.implicit(p0).ok()?;
    let grad = shape.gradient(p0).ok()?;
    let t = T::constant(t_root) - f / grad.dot(dir);
    let p = origin + dir.scale(t);
    let normal = shape.gradient(p).ok()?.normalized();
    Some((t, p, normal))
}

/// Vector Snell refraction from index `n1` into `n2`; the normal may point
/// either way.
pub fn refract<T: Scalar>(
    dir: Vec3<T>,
    normal: Vec3<T>,
    n1: f64,
    n2: f64,
) -> Result<Vec3<T>, FailureReason> {
    let mut n = normal;
    let mut cos1 = -n.dot(dir);
    if cos1.value() < 0.0 {
        n = -n;
        cos1 = -cos1;
    }
    let mu = n1 / n2;
    let k = T::constant(1.0) - (T::constant(1.0) - cos1 * cos1) * (mu * mu);
    if k.value() < 0.0 {
        return Err(FailureReason::TotalInternalReflection);
    }
    let cos2 = k.sqrt();
    Ok(dir.scale(T::constant(mu)) + n.scale(cos1 * mu - cos2))
}

/// Outcome of one isolated surface intersection in the initial-guess study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuessTrial {
    pub converged: bool,
    pub iterations: u32,
    pub correct: bool,
}

/// Summary of one strategy at one incidence angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GuessStats {
    pub rays: usize,
    pub max_iterations: u32,
    pub mean_iterations: f64,
    /// Fraction of rays converging to the first in-aperture crossing.
    pub accuracy: f64,
}

/// First crossing of the surface along the ray by marching in `step`
/// increments, refined by bisection. `None` when the ray leaves `t_max`.
pub fn march_intersection(
    shape: &SurfaceShape<f64>,
    origin: Vec3<f64>,
    dir: Vec3<f64>,
    step: f64,
    t_max: f64,
) -> Option<f64> {
    let f = |t: f64| shape.implicit(origin + dir.scale(t)).ok();
    let mut a = 0.0;
    let mut fa = f(a)?;
    let steps = (t_max / step).ceil() as usize;
    for k in 1..=steps {
        let b = k as f64 * step;
        let Some(fb) = f(b) else {
            return None;
        };
        if fa == 0.0 {
            return Some(a);
        }
        if fa.signum() != fb.signum() {
            let (mut lo, mut hi, mut flo) = (a, b, fa);
            for _ in 0..60 {
                let m = 0.5 * (lo + hi);
                let fm = f(m)?;
                if fm.signum() == flo.signum() {
                    lo = m;
                    flo = fm;
                } else {
                    hi = m;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        a = b;
        fa = fb;
    }
    None
}

/// Rays parallel to the y–z plane at `angle_deg` to the axis, on a
/// cell-centred grid of side `side` across the clear aperture, each starting
/// `lead` mm ahead of the aperture along the ray.
pub fn isolated_rays(semi_aperture: f64, angle_deg: f64, side: usize, lead: f64) -> Vec<(Vec3<f64>, Vec3<f64>)> {
    let v = angle_deg.to_radians();
    let d = Vec3::new(0.0, v.sin(), v.cos());
    let mut out = Vec::new();
    for j in 0..side {
        for i in 0..side {
            let (x, y) = (cell_center(i, side), cell_center(j, side));
            if x * x + y * y > 1.0 {
                continue;
            }
            let target = Vec3::new(x * semi_aperture, y * semi_aperture, 0.0);
            out.push((target - d.scale(lead), d));
        }
    }
    out
}

/// Intersect one surface in isolation with each strategy and score against
/// the marching oracle. Rays whose oracle crossing is outside the aperture are
/// skipped.
pub fn compare_initial_guess(
    shape: &SurfaceShape<f64>,
    semi_aperture: f64,
    refs: &ReferencePointSet,
    rays: &[(Vec3<f64>, Vec3<f64>)],
    strategy: InitialGuess,
) -> GuessStats {
    let trials: Vec<Option<GuessTrial>> = rays
        .par_iter()
        .map(|&(o, d)| {
            let lead = -o.z / d.z;
            let truth = march_intersection(shape, o, d, 1e-4, 3.0 * lead.abs() + 10.0)?;
            let hit = o + d.scale(truth);
            if hit.x * hit.x + hit.y * hit.y > semi_aperture * semi_aperture {
                return None;
            }
            let t0 = match strategy {
                InitialGuess::ReferencePoints => initial_guess(o, d, refs).map(|(_, t)| t),
                InitialGuess::TangentPlane => tangent_plane_guess(o, d),
            };
            let res = t0.map(|t0| newton_intersect(shape, o, d, t0));
            Some(match res {
                Some(Ok(h)) => {
                    let q = o + d.scale(h.t);
                    let inside = q.x * q.x + q.y * q.y <= semi_aperture * semi_aperture;
                    GuessTrial {
                        converged: true,
                        iterations: h.iterations,
                        correct: inside && (h.t - truth).abs() < 1e-6,
                    }
                }
                _ => GuessTrial {
                    converged: false,
                    iterations: NEWTON_MAX_ITERS,
                    correct: false,
                },
            })
        })
        .collect();
    let trials: Vec<GuessTrial> = trials.into_iter().flatten().collect();
    let n = trials.len();
    let max_iterations = trials.iter().map(|t| t.iterations).max().unwrap_or(0);
    let mean_iterations = if n == 0 {
        0.0
    } else {
        trials.iter().map(|t| t.iterations as f64).sum::<f64>() / n as f64
    };
    let correct = trials.iter().filter(|t| t.correct).count();
    GuessStats {
        rays: n,
        max_iterations,
        mean_iterations,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
    }
}
