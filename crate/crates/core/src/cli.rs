//! Command-line front end. Lengths are mm, wavelengths nm and angles degrees
//! at this boundary.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::coherent_psf::{psf_three_channel, PsfGridSpec, PsfSettings, PsfStack};
use crate::geometry::{build_reference_points, SurfaceKind, DEFAULT_REFERENCE_AZIMUTHS, DEFAULT_REFERENCE_RADII};
use crate::imaging_sim::{bin_psf, ImagingError, degrade, mtf_from_psf, DegradeSettings, Kernel, DEFAULT_NOISE_SIGMA};
use crate::io::{self, Depth};
use crate::optical_losses::{DesignSpec, EvaluatorSettings, OpticalEvaluator, DEFAULT_SPOT_PUPIL, LOSS_FIELDS};
use crate::optimizer::{optimize, OptimizeError, OptimizeResult, OptimizerConfig, PsfMerit};
use crate::prescription::{emit_prescription, parse_prescription};
use crate::system::LensSystem;
use crate::trace::{
    compare_initial_guess, isolated_rays, sample_pupil, FieldSpec, InitialGuess, TraceContext,
};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "LENSOPT_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "lensopt", version, about = "Differentiable lens simulation and optimization")]
pub struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Single worker thread; outputs are byte-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Trace a pupil grid at each field and write every ray.
    Trace(TraceArgs),
    /// Spot diagrams and the optical loss report.
    Spot(SpotArgs),
    /// Three-channel coherent PSF at one field.
    Psf(PsfArgs),
    /// Sagittal and tangential MTF of the PSF at one field.
    Mtf(PsfArgs),
    /// Optimize the trainable parameters.
    Optimize(OptimizeArgs),
    /// Compare the adjoint gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Degrade an image with the lens's spatially varying PSF.
    Render(RenderArgs),
    /// Newton iterations and accuracy of both initial-guess strategies.
    CompareInit(CompareArgs),
}

#[derive(Args, Debug)]
pub struct LensArg {
    /// Prescription file.
    #[arg(long)]
    pub lens: PathBuf,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub lens: LensArg,
    /// Field angles; defaults to the prescription's fields.
    #[arg(long = "field", alias = "fields", value_delimiter = ',')]
    pub fields: Vec<f64>,
    /// Pupil grid side.
    #[arg(long, default_value_t = 16)]
    pub pupil: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SpecArg {
    /// Design spec as TOML; defaults to the prescription's [design] block.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpotArgs {
    #[command(flatten)]
    pub lens: LensArg,
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long, default_value_t = DEFAULT_SPOT_PUPIL)]
    pub pupil: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PsfArgs {
    #[command(flatten)]
    pub lens: LensArg,
    /// Field angle.
    #[arg(long, default_value_t = 0.0)]
    pub field: f64,
    /// Field azimuth from +y.
    #[arg(long, default_value_t = 0.0)]
    pub azimuth: f64,
    /// Grid side in pixels.
    #[arg(long, default_value_t = crate::coherent_psf::DEFAULT_SIDE)]
    pub side: usize,
    /// Grid pitch in µm.
    #[arg(long, default_value_t = 0.6)]
    pub pitch: f64,
    /// Pupil grid side.
    #[arg(long, default_value_t = crate::coherent_psf::DEFAULT_PUPIL_SAMPLES)]
    pub pupil: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub lens: LensArg,
    #[command(flatten)]
    pub spec: SpecArg,
    /// Base learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub rate: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
    #[arg(long, default_value_t = DEFAULT_SPOT_PUPIL)]
    pub pupil: usize,
    /// Fields for the PSF energy merit; none disables it.
    #[arg(long = "psf-field", value_delimiter = ',')]
    pub psf_fields: Vec<f64>,
    /// Weight of the PSF merit.
    #[arg(long, default_value_t = 1.0)]
    pub hook_weight: f64,
    /// Radius of the PSF energy disc, µm.
    #[arg(long, default_value_t = 3.0)]
    pub psf_radius: f64,
    /// Output prescription; defaults to `<out>/optimized.lens`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub lens: LensArg,
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long, default_value_t = DEFAULT_SPOT_PUPIL)]
    pub pupil: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub lens: LensArg,
    /// Scene as binary PPM/PGM, or a raw `f32` array with a `.hdr` side-car.
    #[arg(long)]
    pub input: PathBuf,
    /// Block grid as ROWSxCOLS.
    #[arg(long, default_value = "15x20")]
    pub blocks: String,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    pub sigma: f64,
    /// Pupil grid side for the block PSFs.
    #[arg(long, default_value_t = 65)]
    pub pupil: usize,
    /// Write 8-bit instead of 16-bit output.
    #[arg(long)]
    pub eight_bit: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub lens: LensArg,
    /// Incidence angles.
    #[arg(long = "fields", alias = "field", value_delimiter = ',', default_values_t = vec![20.0, 25.0, 30.0, 35.0, 40.0])]
    pub fields: Vec<f64>,
    /// Surface index; defaults to the last even asphere.
    #[arg(long)]
    pub surface: Option<usize>,
    /// Ray grid side across the aperture.
    #[arg(long, default_value_t = 36)]
    pub rays: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn numerical(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Numerical(e.into())
}

/// Parse `args` (including the program name), run and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Numerical(e)) = &f;
            eprintln!("error: {e:#}");
            f.code()
        }
    }
}

fn thread_count(deterministic: bool) -> Result<Option<usize>, Failure> {
    if deterministic {
        return Ok(Some(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| usage(anyhow!("{THREADS_ENV} must be a thread count, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

pub fn execute(cli: &Cli) -> Outcome {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.deterministic)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(usage)?;
    pool.install(|| match &cli.command {
        Command::Trace(a) => cmd_trace(a),
        Command::Spot(a) => cmd_spot(a),
        Command::Psf(a) => cmd_psf(a),
        Command::Mtf(a) => cmd_mtf(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a, cli.seed),
        Command::CompareInit(a) => cmd_compare(a),
    })
}

fn load_lens(path: &Path) -> Result<LensSystem, Failure> {
    let text = io::read_text(path).map_err(usage)?;
    parse_prescription(&text)
        .with_context(|| format!("{}", path.display()))
        .map_err(usage)
}

fn load_spec(arg: &SpecArg, system: &LensSystem) -> Result<DesignSpec, Failure> {
    if let Some(p) = &arg.spec {
        let text = io::read_text(p).map_err(usage)?;
        return toml::from_str(&text)
            .with_context(|| format!("{}", p.display()))
            .map_err(usage);
    }
    match system.design {
        Some(d) => Ok(d),
        None => DesignSpec::from_system(system).map_err(numerical),
    }
}

fn write(out: &Path, name: &str, bytes: &[u8]) -> Outcome {
    io::write_file(&out.join(name), bytes).map_err(usage)
}

fn toml_text<T: Serialize>(v: &T) -> Result<String, Failure> {
    toml::to_string(v).map_err(numerical)
}

fn fields_or_default(given: &[f64], system: &LensSystem) -> Vec<FieldSpec> {
    let f = if given.is_empty() { &system.fields } else { given };
    f.iter().map(|&a| FieldSpec::meridional(a)).collect()
}

fn cmd_trace(a: &TraceArgs) -> Outcome {
    let system = load_lens(&a.lens.lens)?;
    let ctx = TraceContext::new(&system).map_err(numerical)?;
    let p = system.params();
    let mut rows = Vec::new();
    for field in fields_or_default(&a.fields, &system) {
        let ellipse = ctx.estimate_vignetting(&p, &field).map_err(numerical)?;
        let pupil = sample_pupil(a.pupil, &ellipse).map_err(numerical)?;
        let bundle = ctx.trace_bundle(&p, &field, ellipse, pupil.clone()).map_err(numerical)?;
        println!(
            "field {:>7.3}°: {:>5} / {} rays valid",
            field.angle,
            bundle.valid_count(),
            pupil.len() * bundle.wavelengths.len()
        );
        for (w, rays) in bundle.rays.iter().enumerate() {
            for (q, r) in pupil.iter().zip(rays) {
                rows.push(vec![
                    field.angle,
                    bundle.wavelengths[w],
                    q[0],
                    q[1],
                    r.origin.x,
                    r.origin.y,
                    r.origin.z,
                    r.direction.x,
                    r.direction.y,
                    r.direction.z,
                    r.opl,
                    if r.valid() { 1.0 } else { 0.0 },
                ]);
            }
        }
    }
    let header = ["field", "wavelength", "px", "py", "x", "y", "z", "dx", "dy", "dz", "opl", "valid"];
    write(&a.out, "rays.csv", io::csv(&header, rows).as_bytes())?;
    let summary = TraceSummary {
        effl: system.effl().ok(),
        entrance_pupil_z: ctx.pupil.z,
        entrance_pupil_radius: ctx.pupil.radius,
        ttl: system.ttl(),
    };
    write(&a.out, "trace.toml", toml_text(&summary)?.as_bytes())
}

#[derive(Serialize)]
struct TraceSummary {
    effl: Option<f64>,
    entrance_pupil_z: f64,
    entrance_pupil_radius: f64,
    ttl: f64,
}

fn cmd_spot(a: &SpotArgs) -> Outcome {
    let system = load_lens(&a.lens.lens)?;
    let spec = load_spec(&a.spec, &system)?;
    let settings = EvaluatorSettings {
        pupil: a.pupil,
        ..EvaluatorSettings::default()
    };
    let ev = OpticalEvaluator::new(&system, spec, settings).map_err(numerical)?;
    let p = system.params();
    let mut rows = Vec::new();
    for (i, field) in ev.fields.iter().enumerate() {
        let bundle = ev
            .ctx
            .trace_bundle(&p, field, ev.ellipses[i], ev.pupils[i].clone())
            .map_err(numerical)?;
        let chief = ev.ctx.chief_ray(&p, field, ev.ctx.reference).map_err(numerical)?;
        for (w, rays) in bundle.rays.iter().enumerate() {
            for r in rays.iter().filter(|r| r.valid()) {
                rows.push(vec![
                    field.angle,
                    bundle.wavelengths[w],
                    r.origin.x - chief.origin.x,
                    r.origin.y - chief.origin.y,
                ]);
            }
        }
    }
    write(&a.out, "spots.csv", io::csv(&["field", "wavelength", "dx", "dy"], rows).as_bytes())?;
    let report = ev.report(&system).map_err(numerical)?;
    println!("L_spot  {:.6e} mm", report.spot);
    println!("L_ttl   {:.6}", report.ttl);
    println!("L_effl  {:.6e}", report.effl);
    println!("L_gap   {:.6}", report.gap);
    println!("L_dist  {:.6e}", report.dist);
    println!("L_optic {:.6}", report.optic);
    write(&a.out, "report.toml", toml_text(&report)?.as_bytes())
}

#[derive(Serialize)]
struct PsfMetadata {
    field: f64,
    azimuth: f64,
    center_mm: [f64; 2],
    pitch_um: f64,
    side: usize,
    pupil: usize,
    wavelengths_nm: Vec<f64>,
    normalization: &'static str,
    files: Vec<String>,
}

fn compute_psf(a: &PsfArgs) -> Result<PsfStack<f64>, Failure> {
    if a.side == 0 || a.side % 2 == 0 {
        return Err(usage(anyhow!("--side must be odd, got {}", a.side)));
    }
    if !(a.pitch > 0.0) {
        return Err(usage(anyhow!("--pitch must be positive")));
    }
    let system = load_lens(&a.lens.lens)?;
    let ctx = TraceContext::new(&system).map_err(numerical)?;
    let field = FieldSpec {
        angle: a.field,
        azimuth: a.azimuth,
    };
    let settings = PsfSettings {
        grid: PsfGridSpec {
            side: a.side,
            pitch: a.pitch * 1e-3,
        },
        pupil: a.pupil,
    };
    psf_three_channel(&ctx, &system.params(), &field, &settings).map_err(numerical)
}

fn cmd_psf(a: &PsfArgs) -> Outcome {
    let stack = compute_psf(a)?;
    let mut files = Vec::new();
    for (w, ch) in stack.channels.iter().enumerate() {
        let tag = format!("psf_{}", stack.wavelengths[w]);
        write(&a.out, &format!("{tag}.csv"), io::grid_csv(ch, a.side).as_bytes())?;
        let peak = ch.iter().cloned().fold(0.0, f64::max);
        let scaled: Vec<f64> = ch.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
        write(&a.out, &format!("{tag}.pgm"), &io::encode_pgm(&scaled, a.side, a.side, Depth::Sixteen))?;
        files.push(format!("{tag}.csv"));
        files.push(format!("{tag}.pgm"));
    }
    let meta = PsfMetadata {
        field: a.field,
        azimuth: a.azimuth,
        center_mm: stack.center,
        pitch_um: a.pitch,
        side: a.side,
        pupil: a.pupil,
        wavelengths_nm: stack.wavelengths.clone(),
        normalization: "unit sum per channel; images scaled to the channel peak",
        files,
    };
    println!("PSF centre ({:.6}, {:.6}) mm", stack.center[0], stack.center[1]);
    write(&a.out, "psf.toml", toml_text(&meta)?.as_bytes())
}

fn cmd_mtf(a: &PsfArgs) -> Outcome {
    let stack = compute_psf(a)?;
    let mut header = vec!["frequency".to_string()];
    let mut cols = Vec::new();
    let mut freqs = Vec::new();
    for (w, ch) in stack.channels.iter().enumerate() {
        let lam = stack.wavelengths[w];
        let (s, t) = mtf_from_psf(ch, a.pitch * 1e-3, lam).map_err(numerical)?;
        header.push(format!("sagittal_{lam}"));
        header.push(format!("tangential_{lam}"));
        freqs = s.frequencies.clone();
        cols.push(s.modulation);
        cols.push(t.modulation);
    }
    let rows = freqs.iter().enumerate().map(|(i, &f)| {
        let mut r = vec![f];
        r.extend(cols.iter().map(|c| c[i]));
        r
    });
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write(&a.out, "mtf.csv", io::csv(&h, rows).as_bytes())
}

/// Negative fraction of each channel's energy inside a disc around the PSF
/// centre; pulling light into the disc sharpens the PSF.
struct EncircledEnergy {
    fields: Vec<FieldSpec>,
    radius_mm: f64,
}

impl PsfMerit for EncircledEnergy {
    fn fields(&self) -> Vec<FieldSpec> {
        self.fields.clone()
    }

    fn evaluate(&self, _: usize, psf: &PsfStack<f64>) -> Result<(f64, Vec<Vec<f64>>), String> {
        let off = psf.grid.offsets();
        let n = psf.grid.side;
        let mask: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = (off[i % n], off[i / n]);
                if x.hypot(y) <= self.radius_mm {
                    -1.0 / psf.channels.len() as f64
                } else {
                    0.0
                }
            })
            .collect();
        let loss = psf
            .channels
            .iter()
            .map(|c| c.iter().zip(&mask).map(|(v, m)| v * m).sum::<f64>())
            .sum();
        Ok((loss, vec![mask; psf.channels.len()]))
    }
}

fn cmd_optimize(a: &OptimizeArgs) -> Outcome {
    let system = load_lens(&a.lens.lens)?;
    let spec = load_spec(&a.spec, &system)?;
    let config = OptimizerConfig {
        rate: a.rate,
        steps: a.steps,
        log_every: a.log_every,
        hook_weight: a.hook_weight,
        evaluator: EvaluatorSettings {
            pupil: a.pupil,
            fields: LOSS_FIELDS,
            ..EvaluatorSettings::default()
        },
        ..OptimizerConfig::default()
    };
    let hook = EncircledEnergy {
        fields: a.psf_fields.iter().map(|&f| FieldSpec::meridional(f)).collect(),
        radius_mm: a.psf_radius * 1e-3,
    };
    let hook_ref: Option<&dyn PsfMerit> = if hook.fields.is_empty() { None } else { Some(&hook) };
    let output = a.output.clone().unwrap_or_else(|| a.out.join("optimized.lens"));
    let save = |r: &OptimizeResult| -> Outcome {
        write(&a.out, "trajectory.jsonl", r.log_lines().as_bytes())?;
        io::write_file(&output, emit_prescription(&r.system).as_bytes()).map_err(usage)
    };
    match optimize(&system, spec, &config, hook_ref) {
        Ok(r) => {
            save(&r)?;
            if let (Some(first), Some(last)) = (r.trajectory.first(), r.trajectory.last()) {
                println!(
                    "step {:>5}: L_optic {:.6} L_spot {:.6e} EFFL {:.6}",
                    first.step, first.optic, first.spot, first.effl
                );
                println!(
                    "step {:>5}: L_optic {:.6} L_spot {:.6e} EFFL {:.6}",
                    last.step, last.optic, last.spot, last.effl
                );
            }
            Ok(())
        }
        Err(OptimizeError::Stalled {
            step,
            halvings,
            reason,
            partial,
        }) => {
            save(&partial)?;
            Err(numerical(anyhow!(
                "step {step}: no valid update after {halvings} halvings ({reason}); last valid state written"
            )))
        }
        Err(e @ OptimizeError::Config(_)) => Err(usage(e)),
        Err(e) => Err(numerical(e)),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome {
    let system = load_lens(&a.lens.lens)?;
    let spec = load_spec(&a.spec, &system)?;
    if system.param_vector().trainable().next().is_none() {
        return Err(usage(anyhow!("the prescription has no trainable parameters")));
    }
    let settings = EvaluatorSettings {
        pupil: a.pupil,
        ..EvaluatorSettings::default()
    };
    let ev = OpticalEvaluator::new(&system, spec, settings).map_err(numerical)?;
    let checks = ev.gradient_check(&system).map_err(numerical)?;
    println!("{:<10} {:>22} {:>22} {:>10}", "parameter", "adjoint", "finite diff", "rel err");
    let mut worst: f64 = 0.0;
    for c in &checks {
        println!(
            "{:<10} {:>22.14e} {:>22.14e} {:>10.2e}",
            c.label, c.adjoint, c.finite_difference, c.error
        );
        worst = worst.max(c.error);
    }
    println!("max relative error {worst:.3e}");
    if let Some(out) = &a.out {
        let rows = checks.iter().map(|c| vec![c.adjoint, c.finite_difference, c.step, c.error]);
        let labels = std::iter::once("parameter").chain(checks.iter().map(|c| c.label.as_str()));
        let text: String = io::csv(&["adjoint", "finite_difference", "step", "error"], rows)
            .lines()
            .zip(labels)
            .map(|(l, p)| format!("{p},{l}\n"))
            .collect();
        write(out, "gradcheck.csv", text.as_bytes())?;
    }
    if checks.iter().all(|c| c.pass) {
        Ok(())
    } else {
        Err(numerical(anyhow!("gradient check failed (max relative error {worst:.3e})")))
    }
}

fn parse_blocks(s: &str) -> Result<(usize, usize), Failure> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(anyhow!("--blocks must look like ROWSxCOLS, got {s:?}")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(anyhow!("bad block count {v:?}")));
    Ok((p(r)?, p(c)?))
}

fn cmd_render(a: &RenderArgs, seed: u64) -> Outcome {
    let system = load_lens(&a.lens.lens)?;
    let (rows, cols) = parse_blocks(&a.blocks)?;
    let pitch = system.sensor_pitch;
    let is_raw = io::header_path(&a.input).exists();
    let scene = if is_raw {
        let (h, d) = io::read_raw(&a.input).map_err(usage)?;
        io::raw_to_scene(&h, &d, pitch, &a.input).map_err(usage)?
    } else {
        io::read_pnm(&a.input, pitch).map_err(usage)?
    };
    let ctx = TraceContext::new(&system).map_err(numerical)?;
    let p = system.params();
    let effl = system.effl().map_err(numerical)?;
    let settings = PsfSettings {
        grid: PsfGridSpec::default(),
        pupil: a.pupil,
    };
    let degrade_settings = DegradeSettings {
        rows,
        cols,
        sigma: a.sigma,
        seed,
    };
    let out = degrade(&scene, &degrade_settings, |c| {
        // the scene is given in sensor coordinates; the chief ray of azimuth
        // atan2(x, y) lands on the ray from the centre through (x, y)
        let r = c.x.hypot(c.y);
        let field = FieldSpec {
            angle: (r / effl).atan().to_degrees(),
            azimuth: if r > 0.0 { c.x.atan2(c.y).to_degrees() } else { 0.0 },
        };
        let stack = psf_three_channel(&ctx, &p, &field, &settings).map_err(|e| e.to_string())?;
        let k = |w: usize| -> Result<Kernel, String> { bin_psf(&stack.channels[w]).map_err(|e| e.to_string()) };
        Ok([k(0)?, k(1)?, k(2)?])
    })
    .map_err(|e| match e {
        ImagingError::Blocks { .. } | ImagingError::Size { .. } => usage(e),
        e => numerical(e),
    })?;
    let depth = if a.eight_bit { Depth::Eight } else { Depth::Sixteen };
    write(&a.out, "degraded.ppm", &io::encode_ppm(&out, depth))?;
    let (h, d) = io::scene_to_raw(&out);
    io::write_raw(&a.out.join("degraded.f32"), &h, &d).map_err(usage)?;
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    angle: f64,
    strategy: &'static str,
    rays: usize,
    max_iterations: u32,
    mean_iterations: f64,
    accuracy: f64,
}

fn cmd_compare(a: &CompareArgs) -> Outcome {
    let system = load_lens(&a.lens.lens)?;
    let idx = match a.surface {
        Some(i) if i < system.surfaces.len() => i,
        Some(i) => return Err(usage(anyhow!("surface {i} out of range"))),
        None => system
            .surfaces
            .iter()
            .rposition(|s| s.kind == SurfaceKind::EvenAsphere)
            .ok_or_else(|| usage(anyhow!("no even asphere in the prescription; pass --surface")))?,
    };
    let s = &system.surfaces[idx];
    let shape = s.shape();
    let refs = build_reference_points(idx, &shape, s.semi_aperture, DEFAULT_REFERENCE_RADII, DEFAULT_REFERENCE_AZIMUTHS)
        .map_err(numerical)?;
    let mut rows = Vec::new();
    println!("surface {idx}, semi-aperture {} mm", s.semi_aperture);
    println!("{:>6} {:>12} {:>6} {:>9} {:>10} {:>9}", "angle", "strategy", "rays", "max iter", "mean iter", "accuracy");
    for &angle in &a.fields {
        let rays = isolated_rays(s.semi_aperture, angle, a.rays, 2.0);
        for (name, strat) in [("proposed", InitialGuess::ReferencePoints), ("tangent", InitialGuess::TangentPlane)] {
            let st = compare_initial_guess(&shape, s.semi_aperture, &refs, &rays, strat);
            println!(
                "{:>6.1} {:>12} {:>6} {:>9} {:>10.3} {:>8.2}%",
                angle,
                name,
                st.rays,
                st.max_iterations,
                st.mean_iterations,
                100.0 * st.accuracy
            );
            rows.push(CompareRow {
                angle,
                strategy: name,
                rays: st.rays,
                max_iterations: st.max_iterations,
                mean_iterations: st.mean_iterations,
                accuracy: st.accuracy,
            });
        }
    }
    if let Some(out) = &a.out {
        let mut text = String::from("angle,strategy,rays,max_iterations,mean_iterations,accuracy\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.angle, r.strategy, r.rays, r.max_iterations, r.mean_iterations, r.accuracy
            ));
        }
        write(out, "compare_init.csv", text.as_bytes())?;
    }
    Ok(())
}
