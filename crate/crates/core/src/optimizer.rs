//! Gradient descent over lens parameters with focal-length-relative rates.

use serde::Serialize;
use thiserror::Error;

use crate::adjoint::{Tape, Var};
use crate::coherent_psf::{psf_three_channel_with, PsfSettings, PsfStack};
use crate::optical_losses::{
    min_gap, DesignSpec, EvaluatorSettings, LossError, LossTerms, OpticalEvaluator,
};
use crate::math::Scalar;
use crate::system::{LensSystem, ParamKind, SystemError};
use crate::trace::FieldSpec;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("cannot scale learning rates: {0}")]
    Rates(SystemError),
    #[error("no trainable parameters")]
    NothingToTrain,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step {step}: no valid update after {halvings} halvings ({reason})")]
    Stalled {
        step: usize,
        halvings: u32,
        reason: String,
        /// Run up to the last valid state.
        partial: Box<OptimizeResult>,
    },
    #[error("PSF merit hook: {0}")]
    Hook(String),
}

/// Multipliers applied on top of the focal-length scaling, per kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KindMultipliers {
    pub curvature: f64,
    pub thickness: f64,
    pub conic: f64,
    pub asphere: f64,
}

impl Default for KindMultipliers {
    fn default() -> Self {
        KindMultipliers {
            curvature: 1.0,
            thickness: 1.0,
            conic: 1.0,
            asphere: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizerConfig {
    pub rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub multipliers: KindMultipliers,
    pub evaluator: EvaluatorSettings,
    /// Record every `log_every` steps; the first and last step are always kept.
    pub log_every: usize,
    pub max_halvings: u32,
    /// Weight of the PSF merit hook relative to the optical loss.
    pub hook_weight: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            rate: 1e-3,
            steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            multipliers: KindMultipliers::default(),
            evaluator: EvaluatorSettings::default(),
            log_every: 1,
            max_halvings: 8,
            hook_weight: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let m = &self.multipliers;
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(OptimizeError::Config(format!("rate must be positive, got {}", self.rate)));
        }
        if [m.curvature, m.thickness, m.conic, m.asphere]
            .iter()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(OptimizeError::Config("rate multipliers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimizeError::Config("moment coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate of each parameter kind for focal length `f`: curvature
/// `η/f`, thickness `η f`, conic `η`, coefficient of `r^{2i}` `η/f^{i−1}`.
pub fn scaled_rate(kind: ParamKind, f: f64, eta: f64) -> f64 {
    match kind {
        ParamKind::Curvature => eta / f,
        ParamKind::Thickness => eta * f,
        ParamKind::Conic => eta,
        ParamKind::Asphere(i) => eta / f.powi(i as i32 - 1),
    }
}

/// Rates for `kinds` at the current focal length of `system`.
pub fn scaled_rates(
    system: &LensSystem,
    kinds: &[ParamKind],
    eta: f64,
    m: &KindMultipliers,
) -> Result<Vec<f64>, OptimizeError> {
    let f = system.effl().map_err(OptimizeError::Rates)?.abs();
    Ok(kinds
        .iter()
        .map(|&k| {
            let mult = match k {
                ParamKind::Curvature => m.curvature,
                ParamKind::Thickness => m.thickness,
                ParamKind::Conic => m.conic,
                ParamKind::Asphere(_) => m.asphere,
            };
            scaled_rate(k, f, eta) * mult
        })
        .collect())
}

/// External merit over PSFs. The optimizer computes the three-channel PSF of
/// each declared field on the tape and asks the hook for its loss and the
/// cotangent of that loss with respect to every channel pixel.
pub trait PsfMerit {
    fn fields(&self) -> Vec<FieldSpec>;
    fn settings(&self) -> PsfSettings {
        PsfSettings::default()
    }
    /// Loss and `∂loss/∂PSF[w][pixel]` for the PSFs of field `index`.
    fn evaluate(&self, index: usize, psf: &PsfStack<f64>) -> Result<(f64, Vec<Vec<f64>>), String>;
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub spot: f64,
    pub ttl: f64,
    pub effl_loss: f64,
    pub gap: f64,
    pub dist: f64,
    pub optic: f64,
    pub hook: f64,
    pub effl: f64,
    pub min_gap: f64,
    /// Global step scale used for the update that produced this state.
    pub step_scale: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeResult {
    pub labels: Vec<String>,
    pub trajectory: Vec<TrajectoryRecord>,
    #[serde(skip)]
    pub system: LensSystem,
}

impl OptimizeResult {
    /// One JSON record per line.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.trajectory {
            out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

struct Evaluation {
    terms: LossTerms<f64>,
    hook: f64,
    gradient: Vec<f64>,
}

fn evaluate(
    system: &LensSystem,
    spec: DesignSpec,
    config: &OptimizerConfig,
    hook: Option<&dyn PsfMerit>,
) -> Result<(Evaluation, OpticalEvaluator), OptimizeError> {
    let ev = OpticalEvaluator::new(system, spec, config.evaluator)?;
    let tape = Tape::new();
    let (p, leaves) = system.params_on_tape(&tape);
    let terms = ev.evaluate(&p)?;
    let mut seeds: Vec<(Var, f64)> = vec![(terms.optic, 1.0)];
    let mut hook_loss = 0.0;
    if let Some(h) = hook {
        let settings = h.settings();
        let pv = system.params();
        for (i, field) in h.fields().iter().enumerate() {
            let ellipse = ev.ctx.estimate_vignetting(&pv, field).map_err(LossError::from)?;
            let stack = psf_three_channel_with(&ev.ctx, &p, field, ellipse, &settings)
                .map_err(|e| OptimizeError::Hook(e.to_string()))?;
            let plain = PsfStack {
                field: stack.field,
                grid: stack.grid,
                center: stack.center.map(|c| c.value()),
                wavelengths: stack.wavelengths.clone(),
                channels: (0..stack.channels.len()).map(|w| stack.channel_values(w)).collect(),
                amplitude: Vec::new(),
            };
            let (loss, cot) = h.evaluate(i, &plain).map_err(OptimizeError::Hook)?;
            hook_loss += loss;
            for (ch, c) in stack.channels.iter().zip(&cot) {
                for (v, g) in ch.iter().zip(c) {
                    seeds.push((*v, config.hook_weight * g));
                }
            }
        }
    }
    let trainable: Vec<Var> = system
        .param_vector()
        .trainable()
        .map(|(i, _)| leaves[i])
        .collect();
    let gradient = match tape.backward_seeded(&seeds) {
        Ok(g) => trainable.iter().map(|&v| g.wrt(v)).collect(),
        // the losses do not depend on any trainable parameter
        Err(_) => vec![0.0; trainable.len()],
    };
    Ok((
        Evaluation {
            terms: terms.values(),
            hook: hook_loss,
            gradient,
        },
        ev,
    ))
}

/// Check that `system` is a valid optimizer state and evaluate it.
fn accept(
    system: &LensSystem,
    spec: DesignSpec,
    config: &OptimizerConfig,
    hook: Option<&dyn PsfMerit>,
) -> Result<(Evaluation, f64, f64), String> {
    system.validate().map_err(|e| e.to_string())?;
    let effl = system.effl().map_err(|e| e.to_string())?;
    let (e, ev) = evaluate(system, spec, config, hook).map_err(|e| e.to_string())?;
    let gap = min_gap(&system.params(), &ev.ctx.semi_apertures).map_err(|e| e.to_string())?;
    if gap <= 0.0 {
        return Err(format!("surfaces intersect (min gap {gap:.3e} mm)"));
    }
    if !e.gradient.iter().all(|g| g.is_finite()) {
        return Err("non-finite gradient".into());
    }
    Ok((e, effl, gap))
}

/// Adam over the trainable parameters of `system` with per-kind rates
/// rescaled from the current focal length every step. An update that leaves
/// the lens untraceable, or makes surfaces touch, is retried at half the
/// step up to `max_halvings` times.
pub fn optimize(
    system: &LensSystem,
    spec: DesignSpec,
    config: &OptimizerConfig,
    hook: Option<&dyn PsfMerit>,
) -> Result<OptimizeResult, OptimizeError> {
    config.validate()?;
    let pv = system.param_vector();
    let idx: Vec<usize> = pv.trainable().map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(OptimizeError::NothingToTrain);
    }
    let kinds: Vec<ParamKind> = idx.iter().map(|&i| pv.entries[i].kind).collect();
    let labels = idx.iter().map(|&i| pv.label(i)).collect();

    let (mut current, effl, gap) = match accept(system, spec, config, hook) {
        Ok(v) => v,
        Err(_) => {
            // surface the underlying error
            evaluate(system, spec, config, hook)?;
            return Err(OptimizeError::Config("initial system is not a valid state".into()));
        }
    };
    let mut sys = system.clone();
    let mut values = pv.values();
    let record = |step: usize, e: &Evaluation, effl: f64, gap: f64, scale: f64, v: &[f64]| {
        TrajectoryRecord {
            step,
            spot: e.terms.spot,
            ttl: e.terms.ttl,
            effl_loss: e.terms.effl,
            gap: e.terms.gap,
            dist: e.terms.dist,
            optic: e.terms.optic,
            hook: e.hook,
            effl,
            min_gap: gap,
            step_scale: scale,
            params: idx.iter().map(|&i| v[i]).collect(),
        }
    };
    let mut result = OptimizeResult {
        labels,
        trajectory: vec![record(0, &current, effl, gap, 0.0, &values)],
        system: sys.clone(),
    };

    let n = idx.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    for step in 1..=config.steps {
        let rates = scaled_rates(&sys, &kinds, config.rate, &config.multipliers)?;
        let g = &current.gradient;
        let t = step as i32;
        let mut delta = vec![0.0; n];
        for k in 0..n {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let mh = m[k] / (1.0 - config.beta1.powi(t));
            let vh = v[k] / (1.0 - config.beta2.powi(t));
            delta[k] = rates[k] * mh / (vh.sqrt() + config.epsilon);
        }
        let mut scale = 1.0;
        let mut halvings = 0;
        let accepted = loop {
            let mut trial = values.clone();
            for (k, &i) in idx.iter().enumerate() {
                trial[i] -= scale * delta[k];
            }
            let cand = sys.with_values(&trial);
            match accept(&cand, spec, config, hook) {
                Ok(ok) => break Ok((cand, trial, ok)),
                Err(reason) if halvings >= config.max_halvings => break Err(reason),
                Err(_) => {
                    halvings += 1;
                    scale *= 0.5;
                }
            }
        };
        match accepted {
            Ok((cand, trial, (e, effl, gap))) => {
                sys = cand;
                values = trial;
                let last = step == config.steps;
                if last || step % config.log_every.max(1) == 0 {
                    result.trajectory.push(record(step, &e, effl, gap, scale, &values));
                }
                current = e;
            }
            Err(reason) => {
                result.system = sys;
                return Err(OptimizeError::Stalled {
                    step,
                    halvings,
                    reason,
                    partial: Box::new(result),
                });
            }
        }
    }
    result.system = sys;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_scaling() {
        let eta = 1e-3;
        assert!((scaled_rate(ParamKind::Curvature, 10.0, eta) - 1e-4).abs() < 1e-18);
        assert!((scaled_rate(ParamKind::Thickness, 10.0, eta) - 1e-2).abs() < 1e-16);
        assert_eq!(scaled_rate(ParamKind::Conic, 10.0, eta), eta);
        assert!((scaled_rate(ParamKind::Asphere(3), 10.0, eta) - 1e-5).abs() < 1e-19);
        for k in [
            ParamKind::Curvature,
            ParamKind::Thickness,
            ParamKind::Conic,
            ParamKind::Asphere(5),
        ] {
            assert_eq!(scaled_rate(k, 1.0, eta), eta);
        }
    }

    #[test]
    fn afocal_rates_error() {
        use crate::geometry::Surface;
        use crate::materials::Material;
        let mut s = vec![
            Surface::standard(0.0, 2.0, 5.0, Material::constant(1.5)),
            Surface::standard(0.0, 10.0, 5.0, Material::air()),
        ];
        s[0].stop = true;
        let sys = LensSystem::new(s);
        let r = scaled_rates(&sys, &[ParamKind::Curvature], 1e-3, &KindMultipliers::default());
        assert!(matches!(r, Err(OptimizeError::Rates(SystemError::Afocal))));
    }

    #[test]
    fn bad_config_rejected() {
        let c = OptimizerConfig {
            rate: -1.0,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
