//! First-order optimizers over named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        #[cfg_attr(feature = "serde", serde(default = "adam_lr"))]
        lr: f64,
        #[cfg_attr(feature = "serde", serde(default = "adam_beta1"))]
        beta1: f64,
        #[cfg_attr(feature = "serde", serde(default = "adam_beta2"))]
        beta2: f64,
        #[cfg_attr(feature = "serde", serde(default = "adam_eps"))]
        eps: f64,
    },
}

#[cfg(feature = "serde")]
fn adam_lr() -> f64 {
    1e-3
}

#[cfg(feature = "serde")]
fn adam_beta1() -> f64 {
    0.9
}

#[cfg(feature = "serde")]
fn adam_beta2() -> f64 {
    0.999
}

#[cfg(feature = "serde")]
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr >= 0.0 && lr.is_finite(),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: the step count and, for Adam, first and second moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Learning-rate factor for tensors named `*.lambda_raw`.
    pub lambda_lr_multiplier: f64,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lambda_lr_multiplier: f64) -> Result<Self> {
        config.validate()?;
        if !(lambda_lr_multiplier >= 0.0 && lambda_lr_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_lr_multiplier must be finite and nonnegative, got {lambda_lr_multiplier}"
            )));
        }
        Ok(Optimizer {
            config,
            lambda_lr_multiplier,
            state: OptimizerState::default(),
        })
    }

    /// Applies one update to every tensor that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Matrix>, grads: &Gradients) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as f64;
        for (name, value) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != value.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("{name}: gradient {:?} for {:?}", grad.shape(), value.shape()),
                ));
            }
            let scale = if name.ends_with(".lambda_raw") {
                self.lambda_lr_multiplier
            } else {
                1.0
            };
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    let step = lr * scale;
                    value
                        .as_mut_slice()
                        .iter_mut()
                        .zip(grad.as_slice())
                        .for_each(|(p, g)| *p -= step * g);
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self
                        .state
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Matrix::zeros(value.rows(), value.cols()));
                    let v = self
                        .state
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Matrix::zeros(value.rows(), value.cols()));
                    let c1 = 1.0 - math::powf(beta1, t);
                    let c2 = 1.0 - math::powf(beta2, t);
                    let step = lr * scale;
                    for (((p, g), mi), vi) in value
                        .as_mut_slice()
                        .iter_mut()
                        .zip(grad.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        *p -= step * (*mi / c1) / (math::sqrt(*vi / c2) + eps);
                    }
                }
            }
            value.check_finite(name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(name: &str, g: Matrix) -> Gradients {
        Gradients {
            by_name: [(String::from(name), g)].into_iter().collect(),
        }
    }

    #[test]
    fn sgd_step() {
        let mut p: BTreeMap<String, Matrix> = [(String::from("w"), Matrix::row_vector(&[1.0, 2.0]))]
            .into_iter()
            .collect();
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.5 }, 1.0).unwrap();
        opt.step(&mut p, &grads("w", Matrix::row_vector(&[2.0, -2.0]))).unwrap();
        assert_eq!(p["w"].as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p: BTreeMap<String, Matrix> = [(String::from("w"), Matrix::row_vector(&[1.0, 1.0]))]
            .into_iter()
            .collect();
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1.0).unwrap();
        opt.step(&mut p, &grads("w", Matrix::row_vector(&[3.0, -0.5]))).unwrap();
        assert!((p["w"].as_slice()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p["w"].as_slice()[1] - (1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn lambda_multiplier_applies_only_to_lambda() {
        let mut p: BTreeMap<String, Matrix> = [
            (String::from("a.lambda_raw"), Matrix::row_vector(&[0.0])),
            (String::from("a.w_e"), Matrix::row_vector(&[0.0])),
        ]
        .into_iter()
        .collect();
        let g = Gradients {
            by_name: p.keys().map(|k| (k.clone(), Matrix::row_vector(&[1.0]))).collect(),
        };
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0 }, 0.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p["a.lambda_raw"].as_slice(), &[0.0]);
        assert_eq!(p["a.w_e"].as_slice(), &[-1.0]);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: -1.0 }, 1.0).is_err());
        assert!(Optimizer::new(OptimizerConfig::default(), f64::NAN).is_err());
    }
}
