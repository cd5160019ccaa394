//! The nine headline properties. Each test writes one `acceptance N [PASS]`
//! or `[FAIL]` line to stderr before asserting.

mod common;

use std::time::{Duration, Instant};

use common::*;
use lensopt::adjoint::{Tape, Var};
use lensopt::coherent_psf::{
    coherent_sum, normalize, psf_three_channel, PsfGridSpec, PsfSettings, DEFAULT_PUPIL_SAMPLES,
};
use lensopt::geometry::{build_reference_points, SurfaceKind, DEFAULT_REFERENCE_AZIMUTHS, DEFAULT_REFERENCE_RADII};
use lensopt::imaging_sim::mtf_from_psf;
use lensopt::math::{Scalar, Vec3};
use lensopt::optical_losses::{
    combine, loss_dist, loss_gap, loss_ttl, DesignSpec, EvaluatorSettings, LossWeights, OpticalEvaluator,
};
use lensopt::optimizer::{optimize, OptimizerConfig};
use lensopt::system::ParamKind;
use lensopt::trace::{
    compare_initial_guess, isolated_rays, sample_pupil, FieldSpec, InitialGuess, Ray, TraceContext,
};

fn design(system: &lensopt::system::LensSystem) -> DesignSpec {
    system.design.expect("fixture declares a [design] block")
}

#[test]
fn criterion_1_adjoint_matches_finite_differences() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut count = 0;
    for name in ["singlet.lens", "doublet.lens", "high_asphere.lens"] {
        let system = fixture(name);
        let ev = OpticalEvaluator::new(&system, design(&system), EvaluatorSettings::default()).unwrap();
        for c in ev.gradient_check(&system).unwrap() {
            count += 1;
            worst = worst.max(c.error);
            if !c.pass {
                failures.push(format!("{name} {} ({:.2e})", c.label, c.error));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    report(
        1,
        "adjoint vs finite differences",
        pass,
        &format!("{count} parameters, max relative error {worst:.2e}, {elapsed:.1?}; failing: {failures:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_custom_adjoint_equals_naive_tape() {
    let start = Instant::now();
    let system = fixture("singlet.lens");
    let ctx = TraceContext::new(&system).unwrap();
    let field = FieldSpec::meridional(3.0);
    let ellipse = ctx.estimate_vignetting(&system.params(), &field).unwrap();
    let pupil = sample_pupil(32, &ellipse).unwrap();
    let grid = PsfGridSpec { side: 15, pitch: 0.6e-3 };
    let w = ctx.reference;
    let n_image = *ctx.media[w].last().unwrap();
    let lam = ctx.wavelengths[w];
    // weights make the loss sensitive to the PSF shape, not just its sum
    let weights: Vec<f64> = (0..grid.len()).map(|i| ((i * 7919) % 17) as f64 / 17.0).collect();

    let gradient = |naive: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let (p, leaves) = system.params_on_tape(&tape);
        let bundle = ctx.trace_bundle_with(&p, &field, ellipse, pupil.clone()).unwrap();
        let chief = ctx.chief_ray(&p, &field, w).unwrap();
        let center = [chief.origin.x, chief.origin.y];
        let rays = &bundle.rays[w];
        let intensity = if naive {
            naive_intensity(rays, center, &grid, lam, n_image)
        } else {
            coherent_sum(rays, &grid, center, lam, n_image).unwrap().intensity
        };
        let psf = normalize(&intensity);
        let mut loss = Var::constant(0.0);
        for (v, &k) in psf.iter().zip(&weights) {
            loss = loss + *v * k;
        }
        let g = tape.backward(loss).unwrap();
        let trainable: Vec<f64> = system
            .param_vector()
            .trainable()
            .map(|(i, _)| g.wrt(leaves[i]))
            .collect();
        (loss.value(), trainable)
    };
    let (fast_loss, fast) = gradient(false);
    let (slow_loss, slow) = gradient(true);
    let diff = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = diff <= 1e-10 && (fast_loss - slow_loss).abs() <= 1e-12 && elapsed < Duration::from_secs(30);
    report(
        2,
        "coherent-sum adjoint equals elementwise tape",
        pass,
        &format!(
            "{} rays x {} pixels, max |Δgrad| {diff:.2e} over {} parameters (|grad| up to {:.2e}), {elapsed:.1?}",
            bundle_rays(&system, &field, 32),
            grid.len(),
            fast.len(),
            slow.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        ),
    );
    assert!(pass);
}

fn bundle_rays(system: &lensopt::system::LensSystem, field: &FieldSpec, n: usize) -> usize {
    let ctx = TraceContext::new(system).unwrap();
    let p = system.params();
    let e = ctx.estimate_vignetting(&p, field).unwrap();
    let b = ctx.trace_bundle(&p, field, e, sample_pupil(n, &e).unwrap()).unwrap();
    b.rays[ctx.reference].iter().filter(|r| r.valid()).count()
}

#[test]
fn criterion_3_psf_node_memory() {
    let n = DEFAULT_PUPIL_SAMPLES * DEFAULT_PUPIL_SAMPLES;
    let grid = PsfGridSpec::default();
    let tape = Tape::new();
    let x = tape.var(0.0);
    let rays: Vec<Ray<Var>> = (0..n)
        .map(|i| {
            let (u, v) = ((i % 129) as f64 - 64.0, (i / 129) as f64 - 64.0);
            Ray {
                origin: Vec3::new(x + u * 1e-5, x + v * 1e-5, x),
                direction: Vec3::new(x + u * 1e-4, x + v * 1e-4, x + 1.0),
                opl: x + (u * u + v * v) * 1e-9,
                amplitude: 1.0,
                wavelength: 587.6,
                failure: None,
            }
        })
        .collect();
    let _ = coherent_sum(&rays, &grid, [x, x], 587.6, 1.0).unwrap();
    let saved = tape.memory().custom_saved_bytes();
    let baseline = n * grid.len() * 16;
    let ratio = baseline as f64 / saved as f64;
    let pass = ratio >= 10.0;
    report(
        3,
        "PSF node memory",
        pass,
        &format!("N = {n}, M = {}: saved {saved} B vs broadcast {baseline} B, {ratio:.0}x smaller", grid.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_4_initial_guess_comparison() {
    let start = Instant::now();
    let system = fixture("high_asphere.lens");
    let idx = system
        .surfaces
        .iter()
        .rposition(|s| s.kind == SurfaceKind::EvenAsphere)
        .unwrap();
    let s = &system.surfaces[idx];
    let shape = s.shape();
    let refs = build_reference_points(idx, &shape, s.semi_aperture, DEFAULT_REFERENCE_RADII, DEFAULT_REFERENCE_AZIMUTHS)
        .unwrap();
    let mut proposed_ok = true;
    let mut lines = Vec::new();
    let mut tangent_at_max = 1.0;
    let angles = [20.0, 25.0, 30.0, 35.0, 40.0];
    for &angle in &angles {
        let rays = isolated_rays(s.semi_aperture, angle, 36, 2.0);
        let p = compare_initial_guess(&shape, s.semi_aperture, &refs, &rays, InitialGuess::ReferencePoints);
        let t = compare_initial_guess(&shape, s.semi_aperture, &refs, &rays, InitialGuess::TangentPlane);
        proposed_ok &= p.rays > 0 && p.max_iterations <= 6 && p.accuracy == 1.0;
        if angle == 40.0 {
            tangent_at_max = t.accuracy;
        }
        lines.push(format!(
            "{angle}°: proposed {} iters {:.2}%, tangent {} iters {:.2}%",
            p.max_iterations,
            100.0 * p.accuracy,
            t.max_iterations,
            100.0 * t.accuracy
        ));
    }
    let elapsed = start.elapsed();
    let pass = proposed_ok && tangent_at_max < 1.0 && elapsed < Duration::from_secs(60);
    report(4, "initial-guess comparison", pass, &format!("{}; {elapsed:.1?}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_5_diffraction_limited_psf_and_mtf() {
    let start = Instant::now();
    let system = fixture("ideal.lens");
    let ctx = TraceContext::new(&system).unwrap();
    let p = system.params();
    let axis = FieldSpec::meridional(0.0);
    let lam = system.wavelengths[0] * 1e-6;

    // numerical aperture from the rim of the stop: the plane front leaves the
    // axial beam parallel, and the hyperbolic rear sends it to the image-plane
    // focus ten millimetres behind the rear vertex
    let rear = &system.surfaces[1];
    let h = system.surfaces[0].semi_aperture;
    let sag = rear.shape().sag(h * h).unwrap();
    let na = h / h.hypot(rear.thickness - sag);

    let fine = PsfSettings {
        grid: PsfGridSpec { side: 127, pitch: 0.3e-3 },
        pupil: DEFAULT_PUPIL_SAMPLES,
    };
    let psf = psf_three_channel(&ctx, &p, &axis, &fine).unwrap();
    let zero = first_minimum_radius(&psf.channels[0], fine.grid.side, fine.grid.pitch);
    let airy = j1_first_zero() * lam / (std::f64::consts::TAU * na);
    let zero_err = (zero - airy) / airy;

    let default_grid = PsfSettings::default();
    let psf = psf_three_channel(&ctx, &p, &axis, &default_grid).unwrap();
    let (sag_mtf, tan_mtf) = mtf_from_psf(&psf.channels[0], default_grid.grid.pitch, system.wavelengths[0]).unwrap();
    let cutoff = 2.0 * na / lam;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for curve in [&sag_mtf, &tan_mtf] {
        for (f, m) in curve.frequencies.iter().zip(&curve.modulation) {
            let nu = f / cutoff;
            if nu <= 0.8 {
                worst = worst.max((m - circular_mtf(nu)).abs());
                points += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = zero_err.abs() <= 0.03 && worst <= 0.02 && points > 10 && elapsed < Duration::from_secs(60);
    report(
        5,
        "Airy pattern and diffraction-limited MTF",
        pass,
        &format!(
            "NA {na:.5}; first zero {:.4} µm vs {:.4} µm ({:+.2}%); MTF max |error| {worst:.4} over {points} samples; {elapsed:.1?}",
            zero * 1e3,
            airy * 1e3,
            100.0 * zero_err
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_half_wave_cancellation() {
    let lam_nm = 587.6;
    let lam = lam_nm * 1e-6;
    let ray = |opl: f64| Ray {
        origin: Vec3::new(0.0, 0.0, 0.0),
        direction: Vec3::new(0.0, 0.0, 1.0),
        opl,
        amplitude: 1.0,
        wavelength: lam_nm,
        failure: None,
    };
    let grid = PsfGridSpec::default();
    let s = coherent_sum(&[ray(25.0), ray(25.0 + lam / 2.0)], &grid, [0.0, 0.0], lam_nm, 1.0).unwrap();
    let peak = s.intensity.iter().cloned().fold(0.0, f64::max);
    let pass = peak <= 1e-20;
    report(6, "half-wave destructive interference", pass, &format!("max intensity {peak:.2e} on {} pixels", grid.len()));
    assert!(pass);
}

#[test]
fn criterion_7_optimization_recovers_perturbed_singlet() {
    let start = Instant::now();
    let mut system = fixture("singlet.lens");
    let spec = design(&system);
    let target = spec.effl_target();
    system.surfaces[0].curvature *= 1.05;
    assert!(system.surfaces[0].trainable.contains(&ParamKind::Curvature));
    let result = optimize(&system, spec, &OptimizerConfig::default(), None).unwrap();
    let t = &result.trajectory;
    let (first, last) = (&t[0], t.last().unwrap());
    let reduction = 1.0 - last.spot / first.spot;
    let effl_dev = (last.effl - target).abs() / target;
    let min_gap = t.iter().map(|r| r.min_gap).fold(f64::INFINITY, f64::min);
    let settled = t
        .iter()
        .rposition(|r| (r.effl - target).abs() / target >= 0.005)
        .map_or(0, |i| t[i].step + 1);
    let elapsed = start.elapsed();
    let pass = last.step <= 200
        && reduction >= 0.5
        && effl_dev < 0.005
        && min_gap > 0.0
        && elapsed < Duration::from_secs(300);
    report(
        7,
        "descent from a perturbed singlet",
        pass,
        &format!(
            "L_spot {:.4e} -> {:.4e} mm ({:.1}% lower) in {} steps; final EFFL {:.4} vs {target:.4} ({:+.3}%), within 0.5% from step {settled}; min gap {min_gap:.3} mm; {elapsed:.1?}",
            first.spot,
            last.spot,
            100.0 * reduction,
            last.step,
            last.effl,
            100.0 * (last.effl - target) / target
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_saturated_constants_and_weights() {
    let system = fixture("singlet.lens");
    let spec = design(&system);
    let ctx = TraceContext::new(&system).unwrap();
    let p = system.params();

    let ttl = loss_ttl(&p, &spec);
    let gap = loss_gap(&p, &ctx.semi_apertures, spec.eps_gap).unwrap();
    let gaps = system.surfaces.len() as f64;
    let gap_const = -gaps * 256.0 * spec.eps_gap;
    let f_d = lensopt::optical_losses::dffl(&ctx, &p).unwrap();
    let dist = loss_dist(&ctx, &p, &FieldSpec::meridional(2.0), f_d, spec.eps_dist).unwrap();

    let w = LossWeights::default();
    let weights_ok = (w.ttl, w.effl, w.gap, w.dist) == (0.5, 10.0, 3.0, 5.0);
    let (s, t, e, g, d) = (0.037, 61.25, 0.125, -10.24, 0.0075);
    let c = combine(&w, s, t, e, g, d);
    let combo_ok = c.optic == s + 0.5 * t + 10.0 * e + 3.0 * g + 5.0 * d;

    let pass = ttl == spec.ttl_max && gap == gap_const && dist == spec.eps_dist && weights_ok && combo_ok;
    report(
        8,
        "loss constants and combination",
        pass,
        &format!(
            "L_ttl {ttl} (TTL_max {}), L_gap {gap} (−{gaps}·256·{}), L_dist {dist} (ε {}), weights {:?}, L_optic exact: {combo_ok}",
            spec.ttl_max,
            spec.eps_gap,
            spec.eps_dist,
            (w.ttl, w.effl, w.gap, w.dist)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_deterministic_cli_outputs() {
    let lens = fixture_path("singlet.lens");
    let lens = lens.to_str().unwrap();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let out = |sub: &str| dir.path().join(sub).to_str().unwrap().to_string();
            let commands: [Vec<String>; 3] = [
                vec!["trace".into(), "--lens".into(), lens.into(), "--out".into(), out("trace")],
                vec!["psf".into(), "--lens".into(), lens.into(), "--field".into(), "3".into(), "--out".into(), out("psf")],
                vec![
                    "optimize".into(),
                    "--lens".into(),
                    lens.into(),
                    "--steps".into(),
                    "10".into(),
                    "--out".into(),
                    out("optimize"),
                ],
            ];
            for args in &commands {
                let mut full = vec!["--deterministic", "--seed", "7"];
                full.extend(args.iter().map(String::as_str));
                let o = run_cli(&full);
                assert!(o.status.success(), "{full:?}: {}", String::from_utf8_lossy(&o.stderr));
            }
            let files = tree_bytes(dir.path());
            (dir, files)
        })
        .collect();
    let (a, b) = (&runs[0].1, &runs[1].1);
    let names: Vec<_> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    let pass = !a.is_empty() && a == b;
    report(
        9,
        "deterministic trace, psf and optimize",
        pass,
        &format!("{} files byte-identical across two runs: {}", a.len(), names.join(", ")),
    );
    assert!(pass);
}
