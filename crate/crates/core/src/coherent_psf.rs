//! Coherent point spread function from traced rays.
//!
//! Each valid ray is treated as a plane wave leaving its image-plane point;
//! the complex amplitude on a square grid is the sum of those waves and the
//! PSF is its squared modulus. The sum is recorded on the tape as a single
//! custom node that keeps only per-ray inputs and per-grid results, so the
//! `rays × grid` phase matrix never exists: both passes rebuild it tile by
//! tile from separable x and y phase factors.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adjoint::CustomAdjoint;
use crate::math::{Scalar, Vec3};
use crate::system::SystemParams;
use crate::trace::{FieldSpec, Ray, RayBundle, TraceContext, TraceError, VignettingEllipse};

pub const DEFAULT_PITCH_MM: f64 = 0.6e-3;
pub const DEFAULT_SIDE: usize = 63;
pub const DEFAULT_PUPIL_SAMPLES: usize = 129;
const TILE_ROWS: usize = 8;
/// Per-ray inputs of the summation node: OPL, Px, Py, Dx, Dy, Dz, amplitude.
const RAY_INPUTS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsfError {
    #[error("no valid rays at {wavelength} nm")]
    ExtinctChannel { wavelength: f64 },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Square sampling grid on the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsfGridSpec {
    pub side: usize,
    /// mm
    pub pitch: f64,
}

impl Default for PsfGridSpec {
    fn default() -> Self {
        PsfGridSpec {
            side: DEFAULT_SIDE,
            pitch: DEFAULT_PITCH_MM,
        }
    }
}

impl PsfGridSpec {
    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    /// Offsets of the grid columns (and rows) from the centre, mm.
    pub fn offsets(&self) -> Vec<f64> {
        let mid = (self.side as f64 - 1.0) / 2.0;
        (0..self.side)
            .map(|i| (i as f64 - mid) * self.pitch)
            .collect()
    }
}

/// `Δr = n · D·(G − P)`: optical path from the ray's image-plane point to grid
/// point `g` along the ray's plane wave.
pub fn plane_wave_delta(ray: &Ray<f64>, g: Vec3<f64>, n_image: f64) -> f64 {
    n_image * ray.direction.dot(g - ray.origin)
}

/// Everything the summation node keeps between passes.
struct CoherentSum {
    /// Vacuum wavenumber, applied to optical path lengths.
    k0: f64,
    /// Wavenumber in image space, applied to geometric offsets.
    kd: f64,
    opl_ref: f64,
    rays: Vec<[f64; RAY_INPUTS]>,
    offsets: Vec<f64>,
    center: [f64; 2],
    grid_x: Vec<f64>,
    grid_y: Vec<f64>,
    amplitude: Vec<Complex64>,
}

impl CoherentSum {
    fn side(&self) -> usize {
        self.offsets.len()
    }

    /// Phase at the grid centre and the per-axis phase steps of ray `r`.
    fn base(&self, r: &[f64; RAY_INPUTS]) -> (Complex64, f64, f64) {
        let [opl, px, py, dx, dy, dz, a] = *r;
        let alpha = self.k0 * (opl - self.opl_ref)
            + self.kd * (dx * (self.center[0] - px) + dy * (self.center[1] - py));
        (
            Complex64::from_polar(a * dz, alpha),
            self.kd * dx,
            self.kd * dy,
        )
    }

    fn tiles(&self) -> Vec<std::ops::Range<usize>> {
        let side = self.side();
        (0..side.div_ceil(TILE_ROWS))
            .map(|t| t * TILE_ROWS..((t + 1) * TILE_ROWS).min(side))
            .collect()
    }

    fn forward(&mut self) {
        let side = self.side();
        let tiles = self.tiles();
        let this = &*self;
        let parts: Vec<Vec<Complex64>> = tiles
            .par_iter()
            .map(|rows| {
                let mut acc = vec![Complex64::new(0.0, 0.0); rows.len() * side];
                let mut ex = vec![Complex64::new(0.0, 0.0); side];
                for r in &this.rays {
                    let (c0, kx, ky) = this.base(r);
                    if c0.norm_sqr() == 0.0 {
                        continue;
                    }
                    for (e, &o) in ex.iter_mut().zip(&this.offsets) {
                        *e = Complex64::from_polar(1.0, kx * o);
                    }
                    for (ti, v) in rows.clone().enumerate() {
                        let cy = c0 * Complex64::from_polar(1.0, ky * this.offsets[v]);
                        let row = &mut acc[ti * side..(ti + 1) * side];
                        for (a, e) in row.iter_mut().zip(&ex) {
                            *a += cy * e;
                        }
                    }
                }
                acc
            })
            .collect();
        self.amplitude = parts.concat();
    }
}

impl CustomAdjoint for CoherentSum {
    fn name(&self) -> &str {
        "coherent_sum"
    }

    fn saved_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        self.rays.len() * RAY_INPUTS * f
            + (self.grid_x.len() + self.grid_y.len()) * f
            + self.amplitude.len() * std::mem::size_of::<Complex64>()
    }

    fn backward(&self, cot: &[f64]) -> Vec<f64> {
        let side = self.side();
        // B = ḡ · conj(A); every cotangent is a projection of Σ_g B(g) c_i(g)
        let b: Vec<Complex64> = cot
            .iter()
            .zip(&self.amplitude)
            .map(|(g, a)| a.conj() * *g)
            .collect();
        let n = self.rays.len();
        let tiles = self.tiles();
        // per tile, per ray: Σ B e, Σ B e·ox, Σ B e·oy with e the unit phasor
        let parts: Vec<Vec<[Complex64; 3]>> = tiles
            .par_iter()
            .map(|rows| {
                let mut out = vec![[Complex64::new(0.0, 0.0); 3]; n];
                let mut ex = vec![Complex64::new(0.0, 0.0); side];
                for (i, r) in self.rays.iter().enumerate() {
                    let (_, kx, ky) = self.base(r);
                    for (e, &o) in ex.iter_mut().zip(&self.offsets) {
                        *e = Complex64::from_polar(1.0, kx * o);
                    }
                    let mut s = [Complex64::new(0.0, 0.0); 3];
                    for v in rows.clone() {
                        let ey = Complex64::from_polar(1.0, ky * self.offsets[v]);
                        let brow = &b[v * side..(v + 1) * side];
                        let mut w = Complex64::new(0.0, 0.0);
                        let mut wx = Complex64::new(0.0, 0.0);
                        for ((bb, e), &o) in brow.iter().zip(&ex).zip(&self.offsets) {
                            let t = bb * e;
                            w += t;
                            wx += t * o;
                        }
                        s[0] += w * ey;
                        s[1] += wx * ey;
                        s[2] += w * ey * self.offsets[v];
                    }
                    out[i] = s;
                }
                out
            })
            .collect();

        let mut grads = vec![0.0; n * RAY_INPUTS + 2];
        let (mut gcx, mut gcy) = (0.0, 0.0);
        for (i, r) in self.rays.iter().enumerate() {
            let mut t = [Complex64::new(0.0, 0.0); 3];
            for part in &parts {
                for q in 0..3 {
                    t[q] += part[i][q];
                }
            }
            let [_, px, py, dx, dy, dz, a] = *r;
            let m = a * dz;
            let (unit, _, _) = self.base(&[r[0], px, py, dx, dy, 1.0, 1.0]);
            // ∂L/∂φ_i summed over the grid, and its first moments in x, y
            let q0 = unit * t[0];
            let s0 = -2.0 * m * q0.im;
            let s1 = -2.0 * m * (unit * t[1]).im;
            let s2 = -2.0 * m * (unit * t[2]).im;
            let dm = 2.0 * q0.re;
            let k = self.kd;
            let g = &mut grads[i * RAY_INPUTS..(i + 1) * RAY_INPUTS];
            g[0] = self.k0 * s0;
            g[1] = -k * dx * s0;
            g[2] = -k * dy * s0;
            g[3] = k * ((self.center[0] - px) * s0 + s1);
            g[4] = k * ((self.center[1] - py) * s0 + s2);
            g[5] = a * dm;
            g[6] = dz * dm;
            gcx += k * dx * s0;
            gcy += k * dy * s0;
        }
        grads[n * RAY_INPUTS] = gcx;
        grads[n * RAY_INPUTS + 1] = gcy;
        grads
    }
}

/// Unnormalised intensity and complex amplitude of one channel.
pub struct ChannelSum<T> {
    pub intensity: Vec<T>,
    pub amplitude: Vec<Complex64>,
}

/// Coherent sum of the valid rays in `rays` (already at the image plane) on
/// `grid` centred at `center`. `n_image` is the image-space index.
pub fn coherent_sum<T: Scalar>(
    rays: &[Ray<T>],
    grid: &PsfGridSpec,
    center: [T; 2],
    wavelength_nm: f64,
    n_image: f64,
) -> Result<ChannelSum<T>, PsfError> {
    let valid: Vec<&Ray<T>> = rays.iter().filter(|r| r.valid()).collect();
    if valid.is_empty() {
        return Err(PsfError::ExtinctChannel {
            wavelength: wavelength_nm,
        });
    }
    let k0 = std::f64::consts::TAU / (wavelength_nm * 1e-6);
    let opl_ref = valid.iter().map(|r| r.opl.value()).sum::<f64>() / valid.len() as f64;
    let mut inputs = Vec::with_capacity(valid.len() * RAY_INPUTS + 2);
    let mut saved = Vec::with_capacity(valid.len());
    for r in &valid {
        let a = T::constant(r.amplitude);
        let row = [
            r.opl,
            r.origin.x,
            r.origin.y,
            r.direction.x,
            r.direction.y,
            r.direction.z,
            a,
        ];
        saved.push(row.map(Scalar::value));
        inputs.extend_from_slice(&row);
    }
    inputs.extend_from_slice(&center);
    let offsets = grid.offsets();
    let c = [center[0].value(), center[1].value()];
    let mut grid_x = Vec::with_capacity(grid.len());
    let mut grid_y = Vec::with_capacity(grid.len());
    for &oy in &offsets {
        for &ox in &offsets {
            grid_x.push(c[0] + ox);
            grid_y.push(c[1] + oy);
        }
    }
    let mut op = CoherentSum {
        k0,
        kd: k0 * n_image,
        opl_ref,
        rays: saved,
        offsets,
        center: c,
        grid_x,
        grid_y,
        amplitude: Vec::new(),
    };
    op.forward();
    let amplitude = op.amplitude.clone();
    let psf: Vec<f64> = amplitude.iter().map(|a| a.norm_sqr()).collect();
    let intensity = T::custom(&inputs, psf, Box::new(op));
    Ok(ChannelSum {
        intensity,
        amplitude,
    })
}

/// Scale so the channel sums to one.
pub fn normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut total = T::zero();
    for &x in v {
        total = total + x;
    }
    v.iter().map(|&x| x / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsfSettings {
    pub grid: PsfGridSpec,
    /// Pupil grid side.
    pub pupil: usize,
}

impl Default for PsfSettings {
    fn default() -> Self {
        PsfSettings {
            grid: PsfGridSpec::default(),
            pupil: DEFAULT_PUPIL_SAMPLES,
        }
    }
}

/// Unit-sum PSFs of every design wavelength on a common grid.
pub struct PsfStack<T> {
    pub field: FieldSpec,
    pub grid: PsfGridSpec,
    /// Reference-wavelength chief-ray image point, mm.
    pub center: [T; 2],
    pub wavelengths: Vec<f64>,
    /// `channels[w]` is row-major with rows along y.
    pub channels: Vec<Vec<T>>,
    pub amplitude: Vec<Vec<Complex64>>,
}

impl<T: Scalar> PsfStack<T> {
    pub fn channel_values(&self, w: usize) -> Vec<f64> {
        self.channels[w].iter().map(|v| v.value()).collect()
    }
}

fn stack_from_bundle<T: Scalar>(
    ctx: &TraceContext,
    bundle: &RayBundle<T>,
    center: [T; 2],
    grid: &PsfGridSpec,
) -> Result<PsfStack<T>, PsfError> {
    let mut channels = Vec::with_capacity(bundle.wavelengths.len());
    let mut amplitude = Vec::with_capacity(bundle.wavelengths.len());
    for (w, rays) in bundle.rays.iter().enumerate() {
        let n_image = *ctx.media[w].last().expect("non-empty system");
        let ch = coherent_sum(rays, grid, center, bundle.wavelengths[w], n_image)?;
        channels.push(normalize(&ch.intensity));
        amplitude.push(ch.amplitude);
    }
    Ok(PsfStack {
        field: bundle.field,
        grid: *grid,
        center,
        wavelengths: bundle.wavelengths.clone(),
        channels,
        amplitude,
    })
}

/// Three-channel PSF with plain values; rays are traced in parallel.
pub fn psf_three_channel(
    ctx: &TraceContext,
    p: &SystemParams<f64>,
    field: &FieldSpec,
    settings: &PsfSettings,
) -> Result<PsfStack<f64>, PsfError> {
    let ellipse = ctx.estimate_vignetting(p, field)?;
    let pupil = crate::trace::sample_pupil(settings.pupil, &ellipse)?;
    let bundle = ctx.trace_bundle(p, field, ellipse, pupil)?;
    let chief = ctx.chief_ray(p, field, ctx.reference)?;
    stack_from_bundle(ctx, &bundle, [chief.origin.x, chief.origin.y], &settings.grid)
}

/// Three-channel PSF with any scalar type, for differentiation. The pupil
/// ellipse is supplied so that it stays frozen across evaluations.
pub fn psf_three_channel_with<T: Scalar>(
    ctx: &TraceContext,
    p: &SystemParams<T>,
    field: &FieldSpec,
    ellipse: VignettingEllipse,
    settings: &PsfSettings,
) -> Result<PsfStack<T>, PsfError> {
    let pupil = crate::trace::sample_pupil(settings.pupil, &ellipse)?;
    let bundle = ctx.trace_bundle_with(p, field, ellipse, pupil)?;
    let chief = ctx.chief_ray(p, field, ctx.reference)?;
    stack_from_bundle(ctx, &bundle, [chief.origin.x, chief.origin.y], &settings.grid)
}
