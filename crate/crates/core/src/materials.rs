//! Wavelength-dependent refractive index models.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("wavelength {wavelength} nm outside valid range [{min}, {max}] nm")]
    OutOfRange { wavelength: f64, min: f64, max: f64 },
    #[error("unknown material `{0}`")]
    Unknown(String),
}

/// Dispersion formula with fixed coefficients. Wavelengths are nanometres at
/// the API boundary and micrometres inside the formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DispersionModel {
    Constant(f64),
    /// `n² = 1 + Σ B_j λ² / (λ² − C_j)`, λ in µm, C in µm².
    Sellmeier { b: [f64; 3], c: [f64; 3] },
    /// `n² = A0 + A1 λ² + A2 λ⁻² + A3 λ⁻⁴ + A4 λ⁻⁶ + A5 λ⁻⁸`, λ in µm.
    Schott { a: [f64; 6] },
}

/// A named dispersion model together with its valid wavelength range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: Option<String>,
    pub model: DispersionModel,
    /// Valid range in nm.
    pub range: (f64, f64),
}

impl Material {
    pub fn air() -> Self {
        Self::constant(1.0)
    }

    pub fn constant(n: f64) -> Self {
        Material {
            name: None,
            model: DispersionModel::Constant(n),
            range: (0.0, f64::INFINITY),
        }
    }

    pub fn is_air(&self) -> bool {
        self.model == DispersionModel::Constant(1.0)
    }

    pub fn refractive_index(&self, wavelength_nm: f64) -> Result<f64, MaterialError> {
        let (min, max) = self.range;
        if !(wavelength_nm >= min && wavelength_nm <= max) {
            return Err(MaterialError::OutOfRange {
                wavelength: wavelength_nm,
                min,
                max,
            });
        }
        Ok(self.model.index_unchecked(wavelength_nm))
    }

    /// Look up one of the bundled catalog glasses by (case-insensitive) name.
    pub fn by_name(name: &str) -> Result<Self, MaterialError> {
        let upper = name.to_ascii_uppercase();
        let sellmeier = |b: [f64; 3], c: [f64; 3], range| Material {
            name: Some(upper.clone()),
            model: DispersionModel::Sellmeier { b, c },
            range,
        };
        Ok(match upper.as_str() {
            "AIR" => Material {
                name: Some(upper.clone()),
                ..Material::air()
            },
            "N-BK7" => sellmeier(
                [1.03961212, 0.231792344, 1.01046945],
                [0.00600069867, 0.0200179144, 103.560653],
                (300.0, 2500.0),
            ),
            "F2" => sellmeier(
                [1.34533359, 0.209073176, 0.937357162],
                [0.00997743871, 0.0470450767, 111.886764],
                (320.0, 2500.0),
            ),
            "N-SF5" => sellmeier(
                [1.52481889, 0.187085527, 1.42729015],
                [0.011254756, 0.0588995392, 129.141675],
                (370.0, 2500.0),
            ),
            "N-SK16" => sellmeier(
                [1.34317774, 0.241144399, 0.994317969],
                [0.00704687339, 0.0229005, 92.7508526],
                (310.0, 2500.0),
            ),
            "PC" => sellmeier([1.4182, 0.0, 0.0], [0.021304, 0.0, 0.0], (400.0, 1100.0)),
            "PMMA" => Material {
                name: Some(upper.clone()),
                model: DispersionModel::Schott {
                    a: [
                        2.399964,
                        -8.308636e-2,
                        -1.919569e-1,
                        8.720608e-2,
                        -1.666411e-2,
                        1.169519e-3,
                    ],
                },
                range: (400.0, 1100.0),
            },
            _ => return Err(MaterialError::Unknown(name.to_string())),
        })
    }
}

impl DispersionModel {
    fn index_unchecked(&self, wavelength_nm: f64) -> f64 {
        let l = wavelength_nm * 1e-3;
        let l2 = l * l;
        match self {
            DispersionModel::Constant(n) => *n,
            DispersionModel::Sellmeier { b, c } => {
                let n2 = 1.0
                    + b.iter()
                        .zip(c)
                        .map(|(b, c)| b * l2 / (l2 - c))
                        .sum::<f64>();
                n2.sqrt()
            }
            DispersionModel::Schott { a } => {
                let inv = 1.0 / l2;
                let n2 = a[0]
                    + a[1] * l2
                    + inv * (a[2] + inv * (a[3] + inv * (a[4] + inv * a[5])));
                n2.sqrt()
            }
        }
    }
}

impl fmt::Display for Material {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.name {
            Some(n) => f.write_str(n),
            None => write!(f, "{:?}", self.model),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 40-digit evaluations of the Sellmeier and Schott formulas for the
    // coefficient sets above.
    const BK7: [(f64, f64); 3] = [
        (486.1, 1.5223786557708987),
        (587.6, 1.5167984379050087),
        (656.3, 1.5143214899520485),
    ];
    const PMMA: [(f64, f64); 3] = [
        (486.1, 1.4972997604538466),
        (587.6, 1.4913998074579021),
        (656.3, 1.4879553967045922),
    ];

    #[test]
    fn air_is_identity() {
        assert_eq!(Material::air().refractive_index(587.6).unwrap(), 1.0);
        assert!(Material::by_name("air").unwrap().is_air());
    }

    #[test]
    fn bk7_matches_high_precision_values() {
        let g = Material::by_name("N-BK7").unwrap();
        for (w, n) in BK7 {
            assert!((g.refractive_index(w).unwrap() - n).abs() < 1e-14, "{w}");
        }
    }

    #[test]
    fn schott_matches_high_precision_values() {
        let g = Material::by_name("pmma").unwrap();
        for (w, n) in PMMA {
            assert!((g.refractive_index(w).unwrap() - n).abs() < 1e-14, "{w}");
        }
    }

    #[test]
    fn schott_constant_polynomial() {
        let n0: f64 = 1.7;
        let m = Material {
            name: None,
            model: DispersionModel::Schott {
                a: [n0 * n0, 0.0, 0.0, 0.0, 0.0, 0.0],
            },
            range: (300.0, 1000.0),
        };
        for w in [350.0, 587.6, 999.0] {
            assert!((m.refractive_index(w).unwrap() - n0).abs() < 1e-15);
        }
    }

    #[test]
    fn catalog_glasses_disperse_normally() {
        for name in ["N-BK7", "F2", "N-SF5", "N-SK16", "PC", "PMMA"] {
            let g = Material::by_name(name).unwrap();
            let f = g.refractive_index(486.1).unwrap();
            let d = g.refractive_index(587.6).unwrap();
            let c = g.refractive_index(656.3).unwrap();
            assert!(f > d && d > c, "{name}");
            assert!(c >= 1.0);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let g = Material::by_name("N-BK7").unwrap();
        assert!(matches!(
            g.refractive_index(200.0),
            Err(MaterialError::OutOfRange { .. })
        ));
        assert!(matches!(
            Material::by_name("unobtainium"),
            Err(MaterialError::Unknown(_))
        ));
    }
}
