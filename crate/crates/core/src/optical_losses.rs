//! Optical merit terms and their weighted combination.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjoint::{Tape, Var};
use crate::geometry::GeometryError;
use crate::math::Scalar;
use crate::system::{paraxial_effl, LensSystem, SystemError, SystemParams};
use crate::trace::{
    sample_pupil, FieldSpec, Ray, RayBundle, TraceContext, TraceError, VignettingEllipse,
};

/// Radial samples per gap.
pub const GAP_SAMPLES: usize = 256;
/// Chief-ray angle used to calibrate the distortion focal length, radians.
pub const DFFL_ANGLE: f64 = 1e-3;
pub const LOSS_FIELDS: usize = 5;
pub const DEFAULT_SPOT_PUPIL: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("gap behind surface {surface}: {source}")]
    Gap {
        surface: usize,
        source: GeometryError,
    },
    #[error("distortion is undefined on axis")]
    AxialDistortion,
    #[error("invalid design spec: {0}")]
    Spec(String),
}

/// Design targets and constraint thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    /// mm
    pub ttl_max: f64,
    /// Full field of view, degrees.
    pub fov: f64,
    /// Full image diagonal, mm.
    pub image_height: f64,
    /// mm
    pub eps_gap: f64,
    pub eps_dist: f64,
}

impl DesignSpec {
    pub const DEFAULT_EPS_GAP: f64 = 0.02;
    pub const DEFAULT_EPS_DIST: f64 = 0.005;

    /// Spec that holds the current focal length, track and field.
    pub fn from_system(system: &LensSystem) -> Result<DesignSpec, SystemError> {
        let half = system.max_field();
        let effl = system.effl()?;
        Ok(DesignSpec {
            ttl_max: system.ttl(),
            fov: 2.0 * half,
            image_height: 2.0 * effl * half.to_radians().tan(),
            eps_gap: Self::DEFAULT_EPS_GAP,
            eps_dist: Self::DEFAULT_EPS_DIST,
        })
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let positive = [
            ("ttl_max", self.ttl_max),
            ("fov", self.fov),
            ("image_height", self.image_height),
            ("eps_gap", self.eps_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::Spec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.eps_dist > 0.0 && self.eps_dist < 0.2) {
            return Err(LossError::Spec(format!(
                "eps_dist must lie in (0, 0.2), got {}",
                self.eps_dist
            )));
        }
        Ok(())
    }

    /// `IH / (2 tan(FoV / 2))` with the full diagonal and the full angle.
    pub fn effl_target(&self) -> f64 {
        self.image_height / (2.0 * (self.fov.to_radians() / 2.0).tan())
    }

    pub fn half_field(&self) -> f64 {
        self.fov / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ttl: f64,
    pub effl: f64,
    pub gap: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ttl: 0.5,
            effl: 10.0,
            gap: 3.0,
            dist: 5.0,
        }
    }
}

/// `max(TTL, TTL_max)`.
pub fn loss_ttl<T: Scalar>(p: &SystemParams<T>, spec: &DesignSpec) -> T {
    p.ttl().max_branch(T::constant(spec.ttl_max))
}

/// `|EFFL − target|` with `n` the media at the reference wavelength.
pub fn loss_effl<T: Scalar>(
    p: &SystemParams<T>,
    n: &[f64],
    spec: &DesignSpec,
) -> Result<T, SystemError> {
    Ok((paraxial_effl(p, n)? - spec.effl_target()).abs())
}

/// Visit the axial clearance `Δz` between consecutive surfaces, and between
/// the last surface and the image plane, at [`GAP_SAMPLES`] radii across the
/// smaller of the two apertures.
fn for_each_gap<T: Scalar>(
    p: &SystemParams<T>,
    semi_apertures: &[f64],
    mut visit: impl FnMut(T),
) -> Result<(), LossError> {
    let s = p.shapes.len();
    for j in 0..s {
        let r_max = if j + 1 < s {
            semi_apertures[j].min(semi_apertures[j + 1])
        } else {
            semi_apertures[j]
        };
        for i in 0..GAP_SAMPLES {
            let r = r_max * i as f64 / (GAP_SAMPLES - 1) as f64;
            let r2 = T::constant(r * r);
            let front = p.shapes[j]
                .sag(r2)
                .map_err(|source| LossError::Gap { surface: j, source })?;
            let back = if j + 1 < s {
                p.shapes[j + 1]
                    .sag(r2)
                    .map_err(|source| LossError::Gap { surface: j + 1, source })?
            } else {
                T::zero()
            };
            visit(p.thickness[j] + back - front);
        }
    }
    Ok(())
}

/// `−Σ_j Σ_i min(Δz_ji, ε)` over the gap samples.
pub fn loss_gap<T: Scalar>(
    p: &SystemParams<T>,
    semi_apertures: &[f64],
    eps: f64,
) -> Result<T, LossError> {
    // saturated samples are counted and added once so the all-safe constant
    // comes out as the exact product
    let mut saturated = 0usize;
    let mut active = T::zero();
    for_each_gap(p, semi_apertures, |dz: T| {
        if dz.value() < eps {
            active = active + dz;
        } else {
            saturated += 1;
        }
    })?;
    Ok(T::constant(-(saturated as f64) * eps) - active)
}

/// Smallest axial clearance over the gap samples.
pub fn min_gap(p: &SystemParams<f64>, semi_apertures: &[f64]) -> Result<f64, LossError> {
    let mut m = f64::INFINITY;
    for_each_gap(p, semi_apertures, |dz| m = m.min(dz))?;
    Ok(m)
}

/// RMS distance of every valid ray of every wavelength from `chief`.
pub fn loss_spot<T: Scalar>(bundle: &RayBundle<T>, chief: &Ray<T>) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for r in bundle.rays.iter().flatten().filter(|r| r.valid()) {
        let dx = r.origin.x - chief.origin.x;
        let dy = r.origin.y - chief.origin.y;
        sum = sum + dx * dx + dy * dy;
        n += 1;
    }
    let ms = sum / n.max(1) as f64;
    // √ has no derivative at 0, where the mean square is at its minimum anyway
    if ms.value() == 0.0 {
        ms
    } else {
        ms.sqrt()
    }
}

/// Radial image height of a chief ray.
fn image_radius<T: Scalar>(r: &Ray<T>) -> T {
    (r.origin.x * r.origin.x + r.origin.y * r.origin.y).sqrt()
}

/// `r_small / tan(v_small)` from a near-axis chief ray.
pub fn dffl<T: Scalar>(ctx: &TraceContext, p: &SystemParams<T>) -> Result<T, LossError> {
    let f = FieldSpec::meridional(DFFL_ANGLE.to_degrees());
    let c = ctx.chief_ray(p, &f, ctx.reference)?;
    Ok(image_radius(&c) / DFFL_ANGLE.tan())
}

/// `max(|r_c − f_d tan v| / (f_d tan v), ε)` for a nonzero field `v`.
pub fn loss_dist<T: Scalar>(
    ctx: &TraceContext,
    p: &SystemParams<T>,
    field: &FieldSpec,
    dffl: T,
    eps: f64,
) -> Result<T, LossError> {
    if field.angle == 0.0 {
        return Err(LossError::AxialDistortion);
    }
    let c = ctx.chief_ray(p, field, ctx.reference)?;
    let ideal = dffl * field.angle.to_radians().tan().abs();
    let rel = ((image_radius(&c) - ideal) / ideal).abs();
    Ok(rel.max_branch(T::constant(eps)))
}

/// Fields uniform in `tan v` from the axis to `half_field` degrees.
pub fn loss_fields(half_field: f64, n: usize) -> Vec<FieldSpec> {
    let t = half_field.to_radians().tan();
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            FieldSpec::meridional((t * f).atan().to_degrees())
        })
        .collect()
}

/// Every merit term in one scalar type.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<T> {
    pub spot: T,
    pub ttl: T,
    pub effl: T,
    pub gap: T,
    pub dist: T,
    pub optic: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn values(&self) -> LossTerms<f64> {
        LossTerms {
            spot: self.spot.value(),
            ttl: self.ttl.value(),
            effl: self.effl.value(),
            gap: self.gap.value(),
            dist: self.dist.value(),
            optic: self.optic.value(),
        }
    }

    fn as_array(&self) -> [T; 6] {
        [self.spot, self.ttl, self.effl, self.gap, self.dist, self.optic]
    }
}

/// `L_spot + λ_t L_ttl + λ_f L_effl + λ_g L_gap + λ_d L_dist`.
pub fn combine<T: Scalar>(w: &LossWeights, spot: T, ttl: T, effl: T, gap: T, dist: T) -> LossTerms<T> {
    let optic = spot + ttl * w.ttl + effl * w.effl + gap * w.gap + dist * w.dist;
    LossTerms {
        spot,
        ttl,
        effl,
        gap,
        dist,
        optic,
    }
}

pub const TERM_NAMES: [&str; 6] = ["spot", "ttl", "effl", "gap", "dist", "optic"];

#[derive(Debug, Clone, Serialize)]
pub struct OpticalLossReport {
    pub spot: f64,
    pub ttl: f64,
    pub effl: f64,
    pub gap: f64,
    pub dist: f64,
    pub optic: f64,
    pub weights: LossWeights,
    /// RMS spot per sampled field, mm.
    pub spot_per_field: Vec<(f64, f64)>,
    /// Euclidean norm of each term's gradient over trainable parameters, in
    /// [`TERM_NAMES`] order.
    pub gradient_norms: [f64; 6],
    /// `∂L_optic/∂θ` for every trainable parameter, in parameter order.
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluatorSettings {
    pub fields: usize,
    pub pupil: usize,
    pub weights: LossWeights,
}

impl Default for EvaluatorSettings {
    fn default() -> Self {
        EvaluatorSettings {
            fields: LOSS_FIELDS,
            pupil: DEFAULT_SPOT_PUPIL,
            weights: LossWeights::default(),
        }
    }
}

/// Loss evaluation with the sampling frozen at construction: entrance pupil,
/// reference points, vignetting ellipses and pupil samples stay fixed, so
/// repeated evaluations form one smooth function of the parameters.
pub struct OpticalEvaluator {
    pub ctx: TraceContext,
    pub spec: DesignSpec,
    pub settings: EvaluatorSettings,
    pub fields: Vec<FieldSpec>,
    pub ellipses: Vec<VignettingEllipse>,
    pub pupils: Vec<Vec<[f64; 2]>>,
}

impl OpticalEvaluator {
    pub fn new(
        system: &LensSystem,
        spec: DesignSpec,
        settings: EvaluatorSettings,
    ) -> Result<Self, LossError> {
        spec.validate()?;
        let ctx = TraceContext::new(system)?;
        let p = system.params();
        let fields = loss_fields(spec.half_field(), settings.fields);
        let ellipses = fields
            .par_iter()
            .map(|f| ctx.estimate_vignetting(&p, f))
            .collect::<Result<Vec<_>, _>>()?;
        let pupils = ellipses
            .iter()
            .map(|e| sample_pupil(settings.pupil, e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(OpticalEvaluator {
            ctx,
            spec,
            settings,
            fields,
            ellipses,
            pupils,
        })
    }

    /// RMS spot of field `i`.
    pub fn spot_at<T: Scalar>(&self, p: &SystemParams<T>, i: usize) -> Result<T, LossError> {
        let f = &self.fields[i];
        let bundle = self
            .ctx
            .trace_bundle_with(p, f, self.ellipses[i], self.pupils[i].clone())?;
        let chief = self.ctx.chief_ray(p, f, self.ctx.reference)?;
        Ok(loss_spot(&bundle, &chief))
    }

    pub fn evaluate<T: Scalar>(&self, p: &SystemParams<T>) -> Result<LossTerms<T>, LossError> {
        let spots = (0..self.fields.len())
            .map(|i| self.spot_at(p, i))
            .collect::<Result<Vec<_>, _>>()?;
        self.finish(p, &spots)
    }

    /// Plain-valued evaluation with fields traced in parallel.
    pub fn evaluate_f64(&self, p: &SystemParams<f64>) -> Result<(LossTerms<f64>, Vec<f64>), LossError> {
        let spots = (0..self.fields.len())
            .into_par_iter()
            .map(|i| self.spot_at(p, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((self.finish(p, &spots)?, spots))
    }

    fn finish<T: Scalar>(&self, p: &SystemParams<T>, spots: &[T]) -> Result<LossTerms<T>, LossError> {
        let mut spot = T::zero();
        for &s in spots {
            spot = spot + s;
        }
        let spot = spot / spots.len() as f64;
        let ttl = loss_ttl(p, &self.spec);
        let effl = loss_effl(p, &self.ctx.media[self.ctx.reference], &self.spec)?;
        let gap = loss_gap(p, &self.ctx.semi_apertures, self.spec.eps_gap)?;
        let f_d = dffl(&self.ctx, p)?;
        let mut dist: Option<T> = None;
        for f in self.fields.iter().filter(|f| f.angle != 0.0) {
            let d = loss_dist(&self.ctx, p, f, f_d, self.spec.eps_dist)?;
            dist = Some(match dist {
                None => d,
                Some(m) => d.max_branch(m),
            });
        }
        let dist = dist.unwrap_or(T::constant(self.spec.eps_dist));
        Ok(combine(&self.settings.weights, spot, ttl, effl, gap, dist))
    }

    /// Losses, per-term gradient norms and the full `L_optic` gradient of
    /// `system`, whose parameters need not equal those at construction.
    pub fn report(&self, system: &LensSystem) -> Result<OpticalLossReport, LossError> {
        let tape = Tape::new();
        let (p, leaves) = system.params_on_tape(&tape);
        let terms = self.evaluate(&p)?;
        let trainable: Vec<Var> = system
            .param_vector()
            .trainable()
            .map(|(i, _)| leaves[i])
            .collect();
        let mut norms = [0.0; 6];
        let mut gradient = vec![0.0; trainable.len()];
        for (k, t) in terms.as_array().iter().enumerate() {
            let g = gradient_of(&tape, *t, &trainable)?;
            norms[k] = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if k == 5 {
                gradient = g;
            }
        }
        let v = terms.values();
        let (_, spots) = self.evaluate_f64(&system.params())?;
        Ok(OpticalLossReport {
            spot: v.spot,
            ttl: v.ttl,
            effl: v.effl,
            gap: v.gap,
            dist: v.dist,
            optic: v.optic,
            weights: self.settings.weights,
            spot_per_field: self.fields.iter().map(|f| f.angle).zip(spots).collect(),
            gradient_norms: norms,
            gradient,
        })
    }
}

/// Adjoint against central finite differences for one trainable parameter.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub label: String,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub step: f64,
    /// `|adjoint − fd| / max(|fd|, floor / rel_tol)`.
    pub error: f64,
    pub pass: bool,
}

pub const GRADCHECK_REL_TOL: f64 = 1e-5;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-10;
/// Edge-sag change of the finite-difference step, mm.
pub const GRADCHECK_SAG_STEP: f64 = 1e-5;

/// Parameter step that moves the surface by about [`GRADCHECK_SAG_STEP`] at
/// the edge of its aperture (or the vertex, for thicknesses).
fn fd_step(system: &LensSystem, entry: &crate::system::ParamEntry) -> f64 {
    use crate::system::ParamKind;
    let s = &system.surfaces[entry.surface];
    let r = s.semi_aperture;
    let sensitivity = match entry.kind {
        ParamKind::Thickness => 1.0,
        ParamKind::Asphere(i) => r.powi(2 * i as i32),
        ParamKind::Curvature | ParamKind::Conic => {
            let shape = |v: f64| {
                let mut sh = s.shape();
                match entry.kind {
                    ParamKind::Curvature => sh.curvature = v,
                    _ => sh.conic = v,
                }
                sh.sag(r * r).unwrap_or(f64::NAN)
            };
            let h = 1e-7 * entry.value.abs().max(1e-3);
            ((shape(entry.value + h) - shape(entry.value - h)) / (2.0 * h)).abs()
        }
    };
    if sensitivity.is_finite() && sensitivity > 1e-12 {
        GRADCHECK_SAG_STEP / sensitivity
    } else {
        GRADCHECK_SAG_STEP
    }
}

impl OpticalEvaluator {
    /// Compare the adjoint gradient of `L_optic` with Richardson-extrapolated
    /// central differences, every evaluation sharing this evaluator's frozen
    /// sampling.
    pub fn gradient_check(&self, system: &LensSystem) -> Result<Vec<GradientCheck>, LossError> {
        let report = self.report(system)?;
        let pv = system.param_vector();
        let base = pv.values();
        let f = |i: usize, h: f64| -> Result<f64, LossError> {
            let mut v = base.clone();
            v[i] += h;
            Ok(self.evaluate_f64(&system.with_values(&v).params())?.0.optic)
        };
        let central = |i: usize, h: f64| -> Result<f64, LossError> { Ok((f(i, h)? - f(i, -h)?) / (2.0 * h)) };
        pv.trainable()
            .zip(&report.gradient)
            .map(|((i, e), &adj)| {
                let h = fd_step(system, e);
                let d1 = central(i, h)?;
                let d2 = central(i, h / 2.0)?;
                let fd = (4.0 * d2 - d1) / 3.0;
                let err = (adj - fd).abs() / fd.abs().max(GRADCHECK_ABS_FLOOR / GRADCHECK_REL_TOL);
                Ok(GradientCheck {
                    label: pv.label(i),
                    adjoint: adj,
                    finite_difference: fd,
                    step: h,
                    error: err,
                    pass: err <= GRADCHECK_REL_TOL,
                })
            })
            .collect()
    }
}

fn gradient_of(tape: &Tape, out: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>, LossError> {
    if out.is_constant() {
        return Ok(vec![0.0; wrt.len()]);
    }
    let g = tape
        .backward(out)
        .map_err(|e| LossError::Spec(format!("adjoint failure: {e}")))?;
    Ok(wrt.iter().map(|&v| g.wrt(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SurfaceShape, Surface};
    use crate::materials::Material;

    fn spec() -> DesignSpec {
        DesignSpec {
            ttl_max: 12.0,
            fov: 40.0,
            image_height: 6.0,
            eps_gap: 0.02,
            eps_dist: 0.005,
        }
    }

    fn planes(gaps: &[f64]) -> SystemParams<f64> {
        let mut s: Vec<Surface> = gaps
            .iter()
            .map(|&d| Surface::standard(0.0, d, 2.0, Material::air()))
            .collect();
        s[0].stop = true;
        LensSystem::new(s).params()
    }

    #[test]
    fn ttl_branches() {
        assert_eq!(loss_ttl(&planes(&[4.0, 6.0]), &spec()), 12.0);
        let tape = Tape::new();
        let sys = {
            let mut s = vec![
                Surface::standard(0.0, 6.0, 2.0, Material::air()),
                Surface::standard(0.0, 7.0, 2.0, Material::air()),
            ];
            s[0].stop = true;
            for x in &mut s {
                x.trainable = vec![crate::system::ParamKind::Thickness];
            }
            LensSystem::new(s)
        };
        let (p, leaves) = sys.params_on_tape(&tape);
        let l = loss_ttl(&p, &spec());
        assert_eq!(l.value(), 13.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(leaves[1]), 1.0);
        assert_eq!(g.wrt(leaves[4]), 1.0);
    }

    #[test]
    fn effl_target_convention() {
        // 6 mm diagonal over 43° full field
        let s = DesignSpec { fov: 43.0, ..spec() };
        assert!((s.effl_target() - 7.6160).abs() < 5e-4, "{}", s.effl_target());
    }

    #[test]
    fn gap_branches() {
        let safe = loss_gap(&planes(&[1.0, 1.0]), &[2.0, 2.0], 0.02).unwrap();
        assert_eq!(safe, -2.0 * 256.0 * 0.02);
        let mut p = planes(&[-0.01, 1.0]);
        p.shapes[1] = SurfaceShape::sphere(0.0);
        let hit = loss_gap(&p, &[2.0, 2.0], 0.02).unwrap();
        assert!((hit - (2.56 - 256.0 * 0.02)).abs() < 1e-12);
    }

    #[test]
    fn spot_of_symmetric_pair() {
        let mk = |x: f64| Ray {
            origin: crate::math::Vec3::new(x, 0.0, 0.0),
            direction: crate::math::Vec3::new(0.0, 0.0, 1.0),
            opl: 0.0,
            amplitude: 1.0,
            wavelength: 587.6,
            failure: None,
        };
        let bundle = RayBundle {
            field: FieldSpec::meridional(0.0),
            ellipse: VignettingEllipse::NONE,
            pupil: vec![[0.0, 0.0]; 2],
            wavelengths: vec![587.6],
            rays: vec![vec![mk(1e-3), mk(-1e-3)]],
        };
        assert!((loss_spot(&bundle, &mk(0.0)) - 1e-3).abs() < 1e-18);
        let same = RayBundle {
            rays: vec![vec![mk(0.0), mk(0.0)]],
            ..bundle
        };
        assert_eq!(loss_spot(&same, &mk(0.0)), 0.0);
    }

    #[test]
    fn combination_is_exact() {
        let w = LossWeights::default();
        let t = combine(&w, 0.25, 12.0, 0.125, -10.24, 0.005);
        assert_eq!(t.optic, 0.25 + 0.5 * 12.0 + 10.0 * 0.125 + 3.0 * -10.24 + 5.0 * 0.005);
    }

    #[test]
    fn fields_uniform_in_tangent() {
        let f = loss_fields(20.0, 5);
        assert_eq!(f[0].angle, 0.0);
        assert!((f[4].angle - 20.0).abs() < 1e-12);
        let t2 = f[2].angle.to_radians().tan();
        assert!((t2 - 20f64.to_radians().tan() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn axial_distortion_is_rejected() {
        let mut s = vec![
            Surface::standard(0.02, 3.0, 5.0, Material::constant(1.5)),
            Surface::standard(0.0, 97.0, 5.0, Material::air()),
        ];
        s[0].stop = true;
        let sys = LensSystem::new(s);
        let ctx = TraceContext::new(&sys).unwrap();
        let p = sys.params();
        let r = loss_dist(&ctx, &p, &FieldSpec::meridional(0.0), 100.0, 0.005);
        assert_eq!(r, Err(LossError::AxialDistortion));
    }
}
