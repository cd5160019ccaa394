//! The lens system container, its flattened parameter vector and first-order
//! (paraxial) properties.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjoint::{Tape, Var};
use crate::geometry::{GeometryError, Surface, SurfaceKind, SurfaceShape};
use crate::materials::MaterialError;
use crate::math::Scalar;
use crate::optical_losses::DesignSpec;

pub const DEFAULT_WAVELENGTHS: [f64; 3] = [486.1, 587.6, 656.3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("system has no surfaces")]
    Empty,
    #[error("expected exactly one stop surface, found {0:?}")]
    StopCount(Vec<usize>),
    #[error("surface {surface}: {source}")]
    Sag {
        surface: usize,
        source: GeometryError,
    },
    #[error("surface {surface}: semi-aperture must be positive, got {value}")]
    Aperture { surface: usize, value: f64 },
    #[error("surface {surface}: standard conic surface carries aspheric terms")]
    StrayAsphere { surface: usize },
    #[error("surface {surface}: {source}")]
    Material {
        surface: usize,
        source: MaterialError,
    },
    #[error("no wavelengths given")]
    NoWavelengths,
    #[error("reference wavelength index {0} out of range")]
    Reference(usize),
    #[error("object distance {0} mm not supported; only objects at infinity are traced")]
    FiniteObject(f64),
    #[error("system is afocal")]
    Afocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Curvature,
    Thickness,
    Conic,
    /// Coefficient of `r^{2i}`, `i` in `1..=8`.
    Asphere(u8),
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKind::Curvature => f.write_str("c"),
            ParamKind::Thickness => f.write_str("d"),
            ParamKind::Conic => f.write_str("k"),
            ParamKind::Asphere(i) => write!(f, "a{i}"),
        }
    }
}

impl std::str::FromStr for ParamKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "c" => Ok(ParamKind::Curvature),
            "d" => Ok(ParamKind::Thickness),
            "k" => Ok(ParamKind::Conic),
            _ => match s.strip_prefix('a').and_then(|i| i.parse::<u8>().ok()) {
                Some(i @ 1..=8) => Ok(ParamKind::Asphere(i)),
                _ => Err(format!("unknown parameter `{s}`")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub surface: usize,
    pub kind: ParamKind,
    pub value: f64,
    pub trainable: bool,
}

/// All lens parameters in a stable order: by surface, then c, d, k and (for
/// even aspheres) a1..a8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub entries: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (usize, &ParamEntry)> {
        self.entries.iter().enumerate().filter(|(_, e)| e.trainable)
    }

    pub fn label(&self, i: usize) -> String {
        let e = &self.entries[i];
        format!("s{}.{}", e.surface, e.kind)
    }
}

/// Paraxial entrance pupil for an object at infinity: axial position measured
/// from the first vertex and radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntrancePupil {
    pub z: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSystem {
    pub surfaces: Vec<Surface>,
    /// nm
    pub wavelengths: Vec<f64>,
    pub reference: usize,
    /// Object-space half angles in degrees.
    pub fields: Vec<f64>,
    /// Full image diagonal in mm.
    pub image_height: f64,
    /// µm
    pub sensor_pitch: f64,
    /// mm; only infinity is supported.
    pub object_distance: f64,
    pub design: Option<DesignSpec>,
}

impl LensSystem {
    pub fn new(surfaces: Vec<Surface>) -> Self {
        LensSystem {
            surfaces,
            wavelengths: DEFAULT_WAVELENGTHS.to_vec(),
            reference: 1,
            fields: vec![0.0],
            image_height: 0.0,
            sensor_pitch: 1.2,
            object_distance: f64::INFINITY,
            design: None,
        }
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        if self.surfaces.is_empty() {
            return Err(SystemError::Empty);
        }
        let stops: Vec<usize> = (0..self.surfaces.len())
            .filter(|&i| self.surfaces[i].stop)
            .collect();
        if stops.len() != 1 {
            return Err(SystemError::StopCount(stops));
        }
        if self.wavelengths.is_empty() {
            return Err(SystemError::NoWavelengths);
        }
        if self.reference >= self.wavelengths.len() {
            return Err(SystemError::Reference(self.reference));
        }
        if self.object_distance.is_finite() {
            return Err(SystemError::FiniteObject(self.object_distance));
        }
        for (i, s) in self.surfaces.iter().enumerate() {
            if !(s.semi_aperture > 0.0) {
                return Err(SystemError::Aperture {
                    surface: i,
                    value: s.semi_aperture,
                });
            }
            if s.kind == SurfaceKind::StandardConic && s.asphere.iter().any(|&a| a != 0.0) {
                return Err(SystemError::StrayAsphere { surface: i });
            }
            s.check_aperture()
                .map_err(|source| SystemError::Sag { surface: i, source })?;
        }
        for &w in &self.wavelengths {
            self.media(w)?;
        }
        Ok(())
    }

    pub fn stop_index(&self) -> usize {
        self.surfaces.iter().position(|s| s.stop).unwrap_or(0)
    }

    pub fn reference_wavelength(&self) -> f64 {
        self.wavelengths[self.reference]
    }

    pub fn ttl(&self) -> f64 {
        self.surfaces.iter().map(|s| s.thickness).sum()
    }

    pub fn max_field(&self) -> f64 {
        self.fields.iter().fold(0.0, |m, f| m.max(f.abs()))
    }

    /// Index of the medium behind each surface at `wavelength`. Object space
    /// is air.
    pub fn media(&self, wavelength: f64) -> Result<Vec<f64>, SystemError> {
        self.surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.material
                    .refractive_index(wavelength)
                    .map_err(|source| SystemError::Material { surface: i, source })
            })
            .collect()
    }

    pub fn param_vector(&self) -> ParamVector {
        let mut entries = Vec::new();
        for (i, s) in self.surfaces.iter().enumerate() {
            let mut push = |kind, value| {
                entries.push(ParamEntry {
                    surface: i,
                    kind,
                    value,
                    trainable: s.trainable.contains(&kind),
                })
            };
            push(ParamKind::Curvature, s.curvature);
            push(ParamKind::Thickness, s.thickness);
            push(ParamKind::Conic, s.conic);
            if s.kind == SurfaceKind::EvenAsphere {
                for (j, &a) in s.asphere.iter().enumerate() {
                    push(ParamKind::Asphere(j as u8 + 1), a);
                }
            }
        }
        ParamVector { entries }
    }

    /// Copy of the system with parameter values replaced, in
    /// [`LensSystem::param_vector`] order.
    pub fn with_values(&self, values: &[f64]) -> LensSystem {
        let mut out = self.clone();
        let pv = self.param_vector();
        assert_eq!(values.len(), pv.len(), "parameter vector length mismatch");
        for (e, &v) in pv.entries.iter().zip(values) {
            let s = &mut out.surfaces[e.surface];
            match e.kind {
                ParamKind::Curvature => s.curvature = v,
                ParamKind::Thickness => s.thickness = v,
                ParamKind::Conic => s.conic = v,
                ParamKind::Asphere(i) => s.asphere[i as usize - 1] = v,
            }
        }
        out
    }

    /// Plain-valued parameter view.
    pub fn params(&self) -> SystemParams<f64> {
        SystemParams::build(self, |_, v| v)
    }

    /// Parameter view with trainable entries as tape leaves. The returned
    /// vector holds one slot per [`ParamVector`] entry; frozen entries are
    /// constants.
    pub fn params_on_tape<'t>(&self, tape: &'t Tape) -> (SystemParams<Var<'t>>, Vec<Var<'t>>) {
        let pv = self.param_vector();
        let leaves: Vec<Var<'t>> = pv
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.var(e.value)
                } else {
                    Var::constant(e.value)
                }
            })
            .collect();
        let p = SystemParams::build(self, |i, _| leaves[i]);
        (p, leaves)
    }

    /// Paraxial entrance pupil from two first-order rays traced to the stop.
    pub fn entrance_pupil(&self) -> Result<EntrancePupil, SystemError> {
        let n = self.media(self.reference_wavelength())?;
        let p = self.params();
        let stop = self.stop_index();
        let (ya, _) = paraxial_to(&p, &n, stop, 1.0, 0.0);
        let (yb, _) = paraxial_to(&p, &n, stop, 0.0, 1.0);
        if ya.abs() < 1e-15 {
            return Err(SystemError::Afocal);
        }
        Ok(EntrancePupil {
            z: yb / ya,
            radius: self.surfaces[stop].semi_aperture / ya.abs(),
        })
    }

    pub fn effl(&self) -> Result<f64, SystemError> {
        let n = self.media(self.reference_wavelength())?;
        paraxial_effl(&self.params(), &n)
    }
}

/// Differentiable parameters of every surface plus global axial positions.
#[derive(Debug, Clone)]
pub struct SystemParams<T> {
    pub shapes: Vec<SurfaceShape<T>>,
    pub thickness: Vec<T>,
    /// Axial position of each vertex (first at 0) followed by the image plane.
    pub vertex_z: Vec<T>,
}

impl<T: Scalar> SystemParams<T> {
    fn build(system: &LensSystem, mut leaf: impl FnMut(usize, f64) -> T) -> Self {
        let pv = system.param_vector();
        let mut shapes = Vec::with_capacity(system.surfaces.len());
        let mut thickness = Vec::with_capacity(system.surfaces.len());
        let mut k = 0;
        for s in &system.surfaces {
            let c = leaf(k, pv.entries[k].value);
            let d = leaf(k + 1, pv.entries[k + 1].value);
            let conic = leaf(k + 2, pv.entries[k + 2].value);
            k += 3;
            let mut asphere = [T::zero(); 8];
            let has = s.kind == SurfaceKind::EvenAsphere;
            if has {
                for a in asphere.iter_mut() {
                    *a = leaf(k, pv.entries[k].value);
                    k += 1;
                }
            }
            shapes.push(SurfaceShape {
                curvature: c,
                conic,
                asphere,
                has_asphere: has,
            });
            thickness.push(d);
        }
        let mut vertex_z = Vec::with_capacity(thickness.len() + 1);
        let mut z = T::zero();
        vertex_z.push(z);
        for &d in &thickness {
            z = z + d;
            vertex_z.push(z);
        }
        SystemParams {
            shapes,
            thickness,
            vertex_z,
        }
    }

    pub fn ttl(&self) -> T {
        *self.vertex_z.last().expect("non-empty system")
    }

    pub fn image_z(&self) -> T {
        self.ttl()
    }
}

impl SystemParams<f64> {
    /// Same values as constants of another scalar type.
    pub fn lift<T: Scalar>(&self) -> SystemParams<T> {
        let c = T::constant;
        SystemParams {
            shapes: self
                .shapes
                .iter()
                .map(|s| SurfaceShape {
                    curvature: c(s.curvature),
                    conic: c(s.conic),
                    asphere: s.asphere.map(c),
                    has_asphere: s.has_asphere,
                })
                .collect(),
            thickness: self.thickness.iter().map(|&d| c(d)).collect(),
            vertex_z: self.vertex_z.iter().map(|&z| c(z)).collect(),
        }
    }
}

/// Trace a paraxial ray given by height `y` and reduced angle `w = n u` at
/// the first vertex up to the vertex of surface `to` (before refraction).
fn paraxial_to<T: Scalar>(p: &SystemParams<T>, n: &[f64], to: usize, y: f64, w: f64) -> (T, T) {
    let mut y = T::constant(y);
    let mut w = T::constant(w);
    let mut n_prev = 1.0;
    for j in 0..to {
        w = w - y * p.shapes[j].curvature * (n[j] - n_prev);
        y = y + p.thickness[j] * w / n[j];
        n_prev = n[j];
    }
    (y, w)
}

/// Effective focal length from a marginal ray `(y, n u) = (1, 0)` traced
/// through every surface: `EFFL = −1 / (n u)'`.
pub fn paraxial_effl<T: Scalar>(p: &SystemParams<T>, n: &[f64]) -> Result<T, SystemError> {
    let last = p.shapes.len() - 1;
    let (y, w) = paraxial_to(p, n, last, 1.0, 0.0);
    let n_prev = if last == 0 { 1.0 } else { n[last - 1] };
    let w = w - y * p.shapes[last].curvature * (n[last] - n_prev);
    if w.value().abs() < 1e-15 {
        return Err(SystemError::Afocal);
    }
    Ok(-(T::constant(1.0) / w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::Material;

    fn system(surfaces: Vec<Surface>) -> LensSystem {
        let mut s = LensSystem::new(surfaces);
        s.surfaces[0].stop = true;
        s
    }

    #[test]
    fn single_surface_power() {
        let s = system(vec![Surface::standard(0.02, 10.0, 5.0, Material::constant(1.5))]);
        assert!((s.effl().unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn planes_are_afocal() {
        let s = system(vec![
            Surface::standard(0.0, 2.0, 5.0, Material::constant(1.5)),
            Surface::standard(0.0, 10.0, 5.0, Material::air()),
        ]);
        assert_eq!(s.effl(), Err(SystemError::Afocal));
    }

    #[test]
    fn thin_lensmaker() {
        let s = system(vec![
            Surface::standard(0.01, 0.0, 5.0, Material::constant(1.5)),
            Surface::standard(-0.01, 100.0, 5.0, Material::air()),
        ]);
        assert!((s.effl().unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn entrance_pupil_of_front_stop() {
        let s = system(vec![
            Surface::standard(0.02, 3.0, 5.0, Material::constant(1.5)),
            Surface::standard(-0.02, 40.0, 5.0, Material::air()),
        ]);
        let ep = s.entrance_pupil().unwrap();
        assert_eq!(ep.z, 0.0);
        assert_eq!(ep.radius, 5.0);
    }

    #[test]
    fn entrance_pupil_behind_thin_lens() {
        // stop 10 mm behind a thin f = 100 lens; its image lies at
        // 1/(1/100 - 1/10)... seen from object space at z = 10·100/(100-10)
        let mut s = LensSystem::new(vec![
            Surface::standard(0.01, 0.0, 10.0, Material::constant(1.5)),
            Surface::standard(-0.01, 10.0, 10.0, Material::air()),
            Surface::standard(0.0, 80.0, 2.0, Material::air()),
        ]);
        s.surfaces[2].stop = true;
        let ep = s.entrance_pupil().unwrap();
        assert!((ep.z - 1000.0 / 90.0).abs() < 1e-9, "{}", ep.z);
        assert!((ep.radius - 2.0 * 100.0 / 90.0).abs() < 1e-9);
    }

    #[test]
    fn two_stops_rejected() {
        let mut s = system(vec![
            Surface::standard(0.02, 3.0, 5.0, Material::constant(1.5)),
            Surface::standard(-0.02, 40.0, 5.0, Material::air()),
        ]);
        s.surfaces[1].stop = true;
        assert_eq!(s.validate(), Err(SystemError::StopCount(vec![0, 1])));
    }

    #[test]
    fn param_vector_round_trip() {
        let mut s = system(vec![
            Surface::standard(0.02, 3.0, 5.0, Material::constant(1.5)),
            Surface::standard(-0.02, 40.0, 5.0, Material::air()),
        ]);
        s.surfaces[1].kind = SurfaceKind::EvenAsphere;
        s.surfaces[1].trainable = vec![ParamKind::Curvature, ParamKind::Asphere(2)];
        let pv = s.param_vector();
        assert_eq!(pv.len(), 3 + 11);
        assert_eq!(pv.trainable().count(), 2);
        assert_eq!(pv.label(5), "s1.k");
        let mut v = pv.values();
        v[4] = 41.0;
        v[7] = 1e-4;
        let t = s.with_values(&v);
        assert_eq!(t.surfaces[1].thickness, 41.0);
        assert_eq!(t.surfaces[1].asphere[1], 1e-4);
        assert_eq!(t.param_vector().values(), v);
    }

    #[test]
    fn effl_gradient_matches_finite_difference() {
        let mut s = system(vec![
            Surface::standard(0.02, 3.0, 5.0, Material::by_name("N-BK7").unwrap()),
            Surface::standard(-0.015, 40.0, 5.0, Material::air()),
        ]);
        s.surfaces[0].trainable = vec![ParamKind::Curvature, ParamKind::Thickness];
        let n = s.media(s.reference_wavelength()).unwrap();
        let tape = Tape::new();
        let (p, leaves) = s.params_on_tape(&tape);
        let f = paraxial_effl(&p, &n).unwrap();
        let g = tape.backward(f).unwrap();
        let v = s.param_vector().values();
        for i in [0, 1] {
            let h = 1e-6 * v[i].abs().max(1e-3);
            let mut up = v.clone();
            up[i] += h;
            let mut dn = v.clone();
            dn[i] -= h;
            let fd = (s.with_values(&up).effl().unwrap() - s.with_values(&dn).effl().unwrap())
                / (2.0 * h);
            let ga = g.wrt(leaves[i]);
            assert!((ga - fd).abs() <= 1e-6 * fd.abs(), "{i}: {ga} vs {fd}");
        }
        // frozen parameter
        assert_eq!(g.wrt(leaves[3]), 0.0);
    }
}
