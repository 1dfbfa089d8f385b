//! First-order optimizers over a flat parameter vector. Both ascend: the
//! gradient passed in is the gradient of the objective to maximize.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-2,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, epsilon: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, n: usize) -> Self {
        match *config {
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerConfig::Adam { lr, beta1, beta2, epsilon } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    /// One ascent step `params += update(grad)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += *lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, epsilon, m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] += *lr * m_hat / (v_hat.sqrt() + *epsilon);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(&OptimizerConfig::Sgd { lr: 0.5 }, 2);
        let mut p = [1.0, -1.0];
        opt.step(&mut p, &[2.0, 0.0]);
        assert_eq!(p, [2.0, -1.0]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Optimizer::new(&OptimizerConfig::default(), 3);
        let mut p = [0.0; 3];
        opt.step(&mut p, &[3.0, -0.001, 0.0]);
        assert!((p[0] - 0.01).abs() < 1e-9);
        assert!((p[1] + 0.01).abs() < 1e-5);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_climbs_a_concave_bowl() {
        let mut opt = Optimizer::new(&OptimizerConfig::Adam { lr: 0.05, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }, 1);
        let mut x = [0.0];
        for _ in 0..2000 {
            let g = -2.0 * (x[0] - 3.0);
            opt.step(&mut x, &[g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn config_json() {
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind": "adam", "lr": 0.1}"#).unwrap();
        assert_eq!(c, OptimizerConfig::Adam { lr: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 });
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"kind": "sgd", "lr": 0.1, "momentum": 0.9}"#).is_err());
    }
}
