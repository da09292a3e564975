//! Analytic-vs-numeric gradient comparison over every model parameter.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{forward, ForwardTrace, Mode, ModelConfig, ModelParams, ParamName, SampleEmbeddings};
use crate::rng::Rng;
use crate::tensor::{finite_diff_grad, max_relative_error, Matrix};
use crate::trainer::{backward, Gradients};

/// Tolerance at the default step; larger steps relax it to `eps`.
pub const BASE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub samples: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 8,
                d_t: 6,
                d_i: 6,
                d_g: 4,
                num_classes: 3,
                dropout_rate: 0.0,
            },
            samples: 5,
            eps: 1e-5,
            tolerance: BASE_TOLERANCE,
            seed: 1,
        }
    }
}

pub fn tolerance_for_eps(eps: f64) -> f64 {
    BASE_TOLERANCE.max(eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_relative_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.max_relative_error < self.tolerance))
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }
}

/// Random parameters with nonzero biases so every path carries gradient.
pub fn random_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    let mut p = ModelParams::init(cfg, rng)?;
    for name in [
        ParamName::BiasT,
        ParamName::BiasI,
        ParamName::BiasG,
        ParamName::BA,
        ParamName::BC,
    ] {
        for v in p.get_mut(name).data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    Ok(p)
}

pub fn random_embeddings(cfg: &ModelConfig, rng: &mut Rng) -> SampleEmbeddings {
    let mut v = |n: usize| (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
    let (t, i, g) = (v(cfg.d_t), v(cfg.d_i), v(cfg.d_g));
    SampleEmbeddings::from_vectors(&t, &i, &g)
}

pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    gradient_check_with(cfg, backward)
}

/// Runs the check against an arbitrary backward implementation, so broken
/// gradients can be fed in to prove the check catches them.
pub fn gradient_check_with<B>(cfg: &GradCheckConfig, backward_fn: B) -> Result<GradCheckReport>
where
    B: Fn(&ForwardTrace, &SampleEmbeddings, &ModelParams, usize) -> Result<Gradients>,
{
    cfg.model.validate()?;
    let model = ModelConfig {
        dropout_rate: 0.0,
        ..cfg.model
    };
    let mut rng = Rng::new(cfg.seed);
    let mut worst = vec![0.0f64; ParamName::ALL.len()];
    for _ in 0..cfg.samples {
        let params = random_params(&model, &mut rng)?;
        let emb = random_embeddings(&model, &mut rng);
        let label = rng.below(model.num_classes);
        let trace = forward(&emb, &params, &model, Mode::Eval)?;
        let analytic = backward_fn(&trace, &emb, &params, label)?;
        for (slot, name) in worst.iter_mut().zip(ParamName::ALL) {
            let numeric = finite_diff_grad(
                |probe: &Matrix| {
                    let mut p = params.clone();
                    *p.get_mut(name) = probe.clone();
                    forward(&emb, &p, &model, Mode::Eval)?.loss(label)
                },
                params.get(name),
                cfg.eps,
            )?;
            *slot = slot.max(max_relative_error(analytic.get(name), &numeric));
        }
    }
    Ok(GradCheckReport {
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        samples: cfg.samples,
        params: ParamName::ALL
            .iter()
            .zip(worst)
            .map(|(n, e)| ParamCheck {
                name: n.as_str().to_string(),
                max_relative_error: e,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_backward_passes() {
        let report = gradient_check(&GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), 13);
    }

    #[test]
    fn broken_gate_gradient_is_caught() {
        let report = gradient_check_with(&GradCheckConfig::default(), |t, e, p, l| {
            let mut g = backward(t, e, p, l)?;
            g.w_a = g.w_a.scale(1.1);
            Ok(g)
        })
        .unwrap();
        assert!(!report.passed());
        let failures: Vec<&str> = report.failures().iter().map(|f| f.name.as_str()).collect();
        assert_eq!(failures, vec!["w_a"]);
    }

    #[test]
    fn larger_step_relaxed_tolerance() {
        let cfg = GradCheckConfig {
            eps: 1e-3,
            tolerance: tolerance_for_eps(1e-3),
            ..Default::default()
        };
        assert_eq!(cfg.tolerance, 1e-3);
        assert!(gradient_check(&cfg).unwrap().passed());
    }
}
