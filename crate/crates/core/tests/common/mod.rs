//! Shared oracles and helpers for the integration tests.
#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lensopt::adjoint::Var;
use lensopt::coherent_psf::PsfGridSpec;
use lensopt::math::Scalar;
use lensopt::prescription::parse_prescription;
use lensopt::system::LensSystem;
use lensopt::trace::Ray;

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap()
}

pub fn fixture(name: &str) -> LensSystem {
    parse_prescription(&fixture_text(name)).unwrap()
}

/// One result line per criterion, written past the test harness's capture so
/// it shows in every run.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {id} [{verdict}] {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Coherent intensity built from elementary tape operations only: every
/// ray–pixel phase, cosine and sine is its own node.
pub fn naive_intensity<'t>(
    rays: &[Ray<Var<'t>>],
    center: [Var<'t>; 2],
    grid: &PsfGridSpec,
    wavelength_nm: f64,
    n_image: f64,
) -> Vec<Var<'t>> {
    let valid: Vec<&Ray<Var<'t>>> = rays.iter().filter(|r| r.valid()).collect();
    let k0 = std::f64::consts::TAU / (wavelength_nm * 1e-6);
    let kd = k0 * n_image;
    let opl_ref = valid.iter().map(|r| r.opl.value()).sum::<f64>() / valid.len() as f64;
    let off = grid.offsets();
    let mut out = Vec::with_capacity(grid.len());
    for &oy in &off {
        for &ox in &off {
            let gx = center[0] + ox;
            let gy = center[1] + oy;
            let mut re = Var::constant(0.0);
            let mut im = Var::constant(0.0);
            for r in &valid {
                let phi = (r.opl - opl_ref) * k0
                    + (r.direction.x * (gx - r.origin.x) + r.direction.y * (gy - r.origin.y)) * kd;
                let m = r.direction.z * r.amplitude;
                re = re + m * phi.cos();
                im = im + m * phi.sin();
            }
            out.push(re * re + im * im);
        }
    }
    out
}

/// Bessel J1 by its power series; accurate to ~1e-15 for |x| < 8.
pub fn bessel_j1(x: f64) -> f64 {
    let h = 0.5 * x;
    let mut term = h;
    let mut sum = term;
    for k in 1..60 {
        term *= -h * h / (k as f64 * (k + 1) as f64);
        sum += term;
    }
    sum
}

/// First positive zero of J1 by bisection.
pub fn j1_first_zero() -> f64 {
    let (mut a, mut b) = (3.0, 4.5);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if bessel_j1(a) * bessel_j1(m) <= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    0.5 * (a + b)
}

/// Diffraction-limited MTF of a circular pupil at normalised frequency `nu`.
pub fn circular_mtf(nu: f64) -> f64 {
    if nu >= 1.0 {
        return 0.0;
    }
    2.0 / std::f64::consts::PI * (nu.acos() - nu * (1.0 - nu * nu).sqrt())
}

/// Radius of the first minimum along the +x half-row through the centre of a
/// square grid, refined by a parabola through the three samples around it.
pub fn first_minimum_radius(values: &[f64], side: usize, pitch: f64) -> f64 {
    let c = side / 2;
    let row: Vec<f64> = (c..side).map(|i| values[c * side + i]).collect();
    let mut k = 1;
    while k + 1 < row.len() && !(row[k] < row[k - 1] && row[k] <= row[k + 1]) {
        k += 1;
    }
    let (y0, y1, y2) = (row[k - 1], row[k], row[k + 1]);
    let shift = 0.5 * (y0 - y2) / (y0 - 2.0 * y1 + y2);
    (k as f64 + shift) * pitch
}

pub fn lensopt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lensopt"))
}

pub fn run_cli(args: &[&str]) -> Output {
    lensopt().args(args).env_remove("LENSOPT_THREADS").output().unwrap()
}

/// Relative path and bytes of every file under `dir`, sorted.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
