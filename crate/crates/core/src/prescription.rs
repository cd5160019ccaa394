//! Plain-text lens prescriptions.
//!
//! ```text
//! [system]
//! wavelengths = 486.1, 587.6, 656.3
//! reference = 1
//! fields = 0, 5, 10
//! image_height = 6
//! sensor_pitch = 1.2
//! object_distance = inf
//! stop = 0
//!
//! [surface]
//! kind = standard
//! c = 0.0196
//! d = 4
//! semi_aperture = 6.25
//! material = N-BK7
//! trainable = c, d
//! ```
//!
//! An optional `[design]` block carries the design targets. Materials are a
//! catalog name or an inline `constant n`, `sellmeier B1 B2 B3 C1 C2 C3` or
//! `schott A0 .. A5`, with an optional `material_range = min max` in nm.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{Surface, SurfaceKind};
use crate::materials::{DispersionModel, Material, MaterialError};
use crate::optical_losses::DesignSpec;
use crate::system::{LensSystem, ParamKind, SystemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrescriptionError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: {source}")]
    Material {
        line: usize,
        source: MaterialError,
    },
    #[error("[{section}] block ending at line {line} is missing `{key}`")]
    Missing {
        line: usize,
        section: String,
        key: String,
    },
    #[error(transparent)]
    Invalid(#[from] SystemError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    System,
    Design,
    Surface,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::System => "system",
            Section::Design => "design",
            Section::Surface => "surface",
        }
    }
}

struct Block {
    section: Section,
    start: usize,
    end: usize,
    entries: Vec<(usize, usize, String, String)>,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> PrescriptionError {
    PrescriptionError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn split_blocks(text: &str) -> Result<Vec<Block>, PrescriptionError> {
    let mut blocks: Vec<Block> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("");
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = line.len() - line.trim_start().len() + 1;
        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(syntax(line_no, indent, "unterminated section header"));
            };
            let section = match name.trim() {
                "system" => Section::System,
                "design" => Section::Design,
                "surface" => Section::Surface,
                other => return Err(syntax(line_no, indent + 1, format!("unknown section `{other}`"))),
            };
            blocks.push(Block {
                section,
                start: line_no,
                end: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(syntax(line_no, indent, "expected `key = value`"));
        };
        let key = line[..eq].trim();
        if key.is_empty() {
            return Err(syntax(line_no, indent, "empty key"));
        }
        let value = line[eq + 1..].trim();
        let value_col = eq + 2 + (line[eq + 1..].len() - line[eq + 1..].trim_start().len());
        let Some(block) = blocks.last_mut() else {
            return Err(syntax(line_no, indent, "entry outside of any section"));
        };
        block.end = line_no;
        block
            .entries
            .push((line_no, value_col, key.to_string(), value.to_string()));
    }
    Ok(blocks)
}

fn number(line: usize, col: usize, s: &str) -> Result<f64, PrescriptionError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| syntax(line, col, format!("expected a number, got `{s}`")))
}

fn numbers(line: usize, col: usize, s: &str) -> Result<Vec<f64>, PrescriptionError> {
    s.split([',', ' ', '\t'])
        .filter(|t| !t.is_empty())
        .map(|t| number(line, col, t))
        .collect()
}

fn boolean(line: usize, col: usize, s: &str) -> Result<bool, PrescriptionError> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(syntax(line, col, format!("expected true or false, got `{s}`"))),
    }
}

fn material(line: usize, col: usize, s: &str) -> Result<Material, PrescriptionError> {
    let mut words = s.split_whitespace();
    let head = words.next().unwrap_or("");
    let rest: Vec<&str> = words.collect();
    let coeffs = || -> Result<Vec<f64>, PrescriptionError> {
        rest.iter().map(|w| number(line, col, w)).collect()
    };
    let expect = |n: usize, got: &[f64]| {
        if got.len() == n {
            Ok(())
        } else {
            Err(syntax(line, col, format!("`{head}` takes {n} coefficients, got {}", got.len())))
        }
    };
    match head {
        "constant" => {
            let c = coeffs()?;
            expect(1, &c)?;
            Ok(Material::constant(c[0]))
        }
        "sellmeier" => {
            let c = coeffs()?;
            expect(6, &c)?;
            Ok(Material {
                name: None,
                model: DispersionModel::Sellmeier {
                    b: [c[0], c[1], c[2]],
                    c: [c[3], c[4], c[5]],
                },
                range: (0.0, f64::INFINITY),
            })
        }
        "schott" => {
            let c = coeffs()?;
            expect(6, &c)?;
            Ok(Material {
                name: None,
                model: DispersionModel::Schott {
                    a: [c[0], c[1], c[2], c[3], c[4], c[5]],
                },
                range: (0.0, f64::INFINITY),
            })
        }
        name if rest.is_empty() => {
            Material::by_name(name).map_err(|source| PrescriptionError::Material { line, source })
        }
        _ => Err(syntax(line, col, format!("cannot read material `{s}`"))),
    }
}

fn parse_surface(b: &Block) -> Result<(Surface, Option<bool>), PrescriptionError> {
    let mut s = Surface::standard(0.0, 0.0, 0.0, Material::air());
    let mut seen = HashSet::new();
    let mut stop = None;
    let mut range = None;
    for (line, col, key, value) in &b.entries {
        let (line, col) = (*line, *col);
        if !seen.insert(key.as_str()) {
            return Err(syntax(line, 1, format!("duplicate key `{key}`")));
        }
        match key.as_str() {
            "kind" => {
                s.kind = match value.as_str() {
                    "standard" => SurfaceKind::StandardConic,
                    "asphere" => SurfaceKind::EvenAsphere,
                    _ => return Err(syntax(line, col, format!("unknown surface kind `{value}`"))),
                }
            }
            "c" => s.curvature = number(line, col, value)?,
            "d" => s.thickness = number(line, col, value)?,
            "k" => s.conic = number(line, col, value)?,
            "semi_aperture" => s.semi_aperture = number(line, col, value)?,
            "material" => s.material = material(line, col, value)?,
            "material_range" => {
                let r = numbers(line, col, value)?;
                if r.len() != 2 {
                    return Err(syntax(line, col, "material_range takes two wavelengths"));
                }
                range = Some((r[0], r[1]));
            }
            "stop" => stop = Some(boolean(line, col, value)?),
            "trainable" => {
                s.trainable = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<ParamKind>().map_err(|m| syntax(line, col, m)))
                    .collect::<Result<_, _>>()?;
            }
            k => match k.strip_prefix('a').and_then(|i| i.parse::<usize>().ok()) {
                Some(i @ 1..=8) => s.asphere[i - 1] = number(line, col, value)?,
                _ => {
                    return Err(PrescriptionError::UnknownKey {
                        line,
                        section: "surface".into(),
                        key: key.clone(),
                    })
                }
            },
        }
    }
    for key in ["c", "d", "semi_aperture"] {
        if !seen.contains(key) {
            return Err(PrescriptionError::Missing {
                line: b.end,
                section: "surface".into(),
                key: key.into(),
            });
        }
    }
    if let Some(r) = range {
        s.material.range = r;
    }
    Ok((s, stop))
}

/// Parse and validate a prescription.
pub fn parse_prescription(text: &str) -> Result<LensSystem, PrescriptionError> {
    let blocks = split_blocks(text)?;
    let mut system = LensSystem::new(Vec::new());
    let mut system_stop: Option<(usize, usize)> = None;
    let mut stops = Vec::new();
    let mut have_system = false;
    for b in &blocks {
        match b.section {
            Section::System => {
                if have_system {
                    return Err(syntax(b.start, 1, "second [system] block"));
                }
                have_system = true;
                for (line, col, key, value) in &b.entries {
                    let (line, col) = (*line, *col);
                    match key.as_str() {
                        "wavelengths" => system.wavelengths = numbers(line, col, value)?,
                        "reference" => {
                            system.reference = value
                                .parse()
                                .map_err(|_| syntax(line, col, "expected a wavelength index"))?
                        }
                        "fields" => system.fields = numbers(line, col, value)?,
                        "image_height" => system.image_height = number(line, col, value)?,
                        "sensor_pitch" => system.sensor_pitch = number(line, col, value)?,
                        "object_distance" => system.object_distance = number(line, col, value)?,
                        "stop" => {
                            let id = value
                                .parse()
                                .map_err(|_| syntax(line, col, "expected a surface index"))?;
                            system_stop = Some((line, id));
                        }
                        _ => {
                            return Err(PrescriptionError::UnknownKey {
                                line,
                                section: b.section.name().into(),
                                key: key.clone(),
                            })
                        }
                    }
                }
            }
            Section::Design => {
                let get = |want: &str| -> Result<f64, PrescriptionError> {
                    let e = b.entries.iter().find(|e| e.2 == want).ok_or_else(|| {
                        PrescriptionError::Missing {
                            line: b.end,
                            section: "design".into(),
                            key: want.into(),
                        }
                    })?;
                    number(e.0, e.1, &e.3)
                };
                let spec = DesignSpec {
                    ttl_max: get("ttl_max")?,
                    fov: get("fov")?,
                    image_height: get("image_height")?,
                    eps_gap: get("eps_gap")?,
                    eps_dist: get("eps_dist")?,
                };
                const KNOWN: [&str; 5] = ["ttl_max", "fov", "image_height", "eps_gap", "eps_dist"];
                if let Some(e) = b.entries.iter().find(|e| !KNOWN.contains(&e.2.as_str())) {
                    return Err(PrescriptionError::UnknownKey {
                        line: e.0,
                        section: "design".into(),
                        key: e.2.clone(),
                    });
                }
                system.design = Some(spec);
            }
            Section::Surface => {
                let (s, stop) = parse_surface(b)?;
                stops.push(stop);
                system.surfaces.push(s);
            }
        }
    }
    if let Some((line, id)) = system_stop {
        if id >= system.surfaces.len() {
            return Err(syntax(line, 1, format!("stop surface {id} does not exist")));
        }
        for (i, s) in system.surfaces.iter_mut().enumerate() {
            s.stop = i == id || stops[i] == Some(true);
        }
    } else {
        for (s, stop) in system.surfaces.iter_mut().zip(&stops) {
            s.stop = stop.unwrap_or(false);
        }
    }
    system.validate()?;
    Ok(system)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn emit_material(out: &mut String, m: &Material) {
    if let Some(name) = &m.name {
        if Material::by_name(name).as_ref() == Ok(m) {
            let _ = writeln!(out, "material = {name}");
            return;
        }
    }
    let _ = match &m.model {
        DispersionModel::Constant(n) => writeln!(out, "material = constant {n}"),
        DispersionModel::Sellmeier { b, c } => writeln!(
            out,
            "material = sellmeier {} {} {} {} {} {}",
            b[0], b[1], b[2], c[0], c[1], c[2]
        ),
        DispersionModel::Schott { a } => writeln!(
            out,
            "material = schott {} {} {} {} {} {}",
            a[0], a[1], a[2], a[3], a[4], a[5]
        ),
    };
    if m.range != (0.0, f64::INFINITY) {
        let _ = writeln!(out, "material_range = {} {}", m.range.0, m.range.1);
    }
}

/// Write a prescription that parses back to the same system.
pub fn emit_prescription(system: &LensSystem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[system]");
    let _ = writeln!(out, "wavelengths = {}", join(&system.wavelengths));
    let _ = writeln!(out, "reference = {}", system.reference);
    let _ = writeln!(out, "fields = {}", join(&system.fields));
    let _ = writeln!(out, "image_height = {}", system.image_height);
    let _ = writeln!(out, "sensor_pitch = {}", system.sensor_pitch);
    let _ = writeln!(out, "object_distance = {}", system.object_distance);
    if let Some(d) = &system.design {
        let _ = writeln!(out, "\n[design]");
        let _ = writeln!(out, "ttl_max = {}", d.ttl_max);
        let _ = writeln!(out, "fov = {}", d.fov);
        let _ = writeln!(out, "image_height = {}", d.image_height);
        let _ = writeln!(out, "eps_gap = {}", d.eps_gap);
        let _ = writeln!(out, "eps_dist = {}", d.eps_dist);
    }
    for s in &system.surfaces {
        let _ = writeln!(out, "\n[surface]");
        let kind = match s.kind {
            SurfaceKind::StandardConic => "standard",
            SurfaceKind::EvenAsphere => "asphere",
        };
        let _ = writeln!(out, "kind = {kind}");
        let _ = writeln!(out, "c = {}", s.curvature);
        let _ = writeln!(out, "d = {}", s.thickness);
        let _ = writeln!(out, "k = {}", s.conic);
        if s.kind == SurfaceKind::EvenAsphere {
            for (i, a) in s.asphere.iter().enumerate() {
                let _ = writeln!(out, "a{} = {a}", i + 1);
            }
        }
        let _ = writeln!(out, "semi_aperture = {}", s.semi_aperture);
        emit_material(&mut out, &s.material);
        if s.stop {
            let _ = writeln!(out, "stop = true");
        }
        if !s.trainable.is_empty() {
            let t: Vec<String> = s.trainable.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(out, "trainable = {}", t.join(", "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SINGLET: &str = "\
[system]
wavelengths = 486.1, 587.6, 656.3
fields = 0, 3

[surface]
c = 0.0196   # front
d = 4
semi_aperture = 6
material = N-BK7
stop = true
trainable = c, d

[surface]
c = -0.0196
d = 48
semi_aperture = 6
";

    #[test]
    fn minimal_singlet() {
        let s = parse_prescription(SINGLET).unwrap();
        assert_eq!(s.surfaces.len(), 2);
        assert_eq!(s.stop_index(), 0);
        assert!(s.effl().unwrap() > 40.0);
        assert_eq!(
            s.surfaces[0].trainable,
            vec![ParamKind::Curvature, ParamKind::Thickness]
        );
    }

    #[test]
    fn two_stops_named() {
        let text = SINGLET.replace("d = 48\n", "d = 48\nstop = true\n");
        let err = parse_prescription(&text).unwrap_err();
        assert_eq!(err, PrescriptionError::Invalid(SystemError::StopCount(vec![0, 1])));
        assert!(err.to_string().contains("[0, 1]"));
    }

    #[test]
    fn unknown_key_has_line() {
        let text = SINGLET.replace("d = 48\n", "d = 48\ncolour = red\n");
        match parse_prescription(&text).unwrap_err() {
            PrescriptionError::UnknownKey { line, key, .. } => {
                assert_eq!(line, 16);
                assert_eq!(key, "colour");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_number_has_column() {
        let text = SINGLET.replace("d = 4\n", "d = four\n");
        match parse_prescription(&text).unwrap_err() {
            PrescriptionError::Syntax { line, column, .. } => assert_eq!((line, column), (7, 5)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn stop_in_system_block() {
        let text = SINGLET
            .replace("stop = true\n", "")
            .replace("fields = 0, 3\n", "fields = 0, 3\nstop = 1\n");
        assert_eq!(parse_prescription(&text).unwrap().stop_index(), 1);
    }

    fn arb_material() -> impl Strategy<Value = Material> {
        prop_oneof![
            Just(Material::by_name("N-BK7").unwrap()),
            Just(Material::by_name("air").unwrap()),
            (1.3f64..1.9).prop_map(Material::constant),
            (1.0f64..2.0, 0.001f64..0.05).prop_map(|(b, c)| Material {
                name: None,
                model: DispersionModel::Sellmeier {
                    b: [b, 0.0, 0.0],
                    c: [c, 0.0, 0.0]
                },
                range: (380.0, 1000.0),
            }),
        ]
    }

    prop_compose! {
        fn arb_surface()(
            c in -0.05f64..0.05,
            d in 0.5f64..20.0,
            k in -2.0f64..0.5,
            a in proptest::array::uniform8(-1e-6f64..1e-6),
            asph in any::<bool>(),
            semi in 1.0f64..4.0,
            m in arb_material(),
            train in proptest::sample::subsequence(vec![ParamKind::Curvature, ParamKind::Thickness, ParamKind::Conic], 0..3),
        ) -> Surface {
            let mut s = Surface::standard(c, d, semi, m);
            s.conic = k;
            s.trainable = train;
            if asph {
                s.kind = SurfaceKind::EvenAsphere;
                s.asphere = a;
            }
            s
        }
    }

    proptest! {
        #[test]
        fn round_trip(
            surfaces in proptest::collection::vec(arb_surface(), 1..5),
            stop in 0usize..5,
            fields in proptest::collection::vec(0.0f64..30.0, 1..4),
            design in any::<bool>(),
        ) {
            let mut sys = LensSystem::new(surfaces);
            let n = sys.surfaces.len();
            sys.surfaces[stop % n].stop = true;
            sys.fields = fields;
            sys.image_height = 6.0;
            if design {
                sys.design = Some(DesignSpec { ttl_max: 5.28, fov: 43.0, image_height: 6.0, eps_gap: 0.02, eps_dist: 0.005 });
            }
            let text = emit_prescription(&sys);
            let back = parse_prescription(&text).unwrap();
            prop_assert_eq!(&back, &sys);
            prop_assert_eq!(emit_prescription(&back), text);
        }
    }
}
