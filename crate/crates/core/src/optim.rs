//! Parameter update rules: plain SGD, SGD with momentum, RMSProp and Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at element {index}")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("parameter {param}: gradient has {grad} elements, parameter has {value}")]
    GradientShape { param: usize, value: usize, grad: usize },
    #[error("optimizer state holds {slots} slots but {params} parameters were given")]
    SlotCount { slots: usize, params: usize },
    #[error("invalid optimizer setting: {0}")]
    Hyper(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Some(OptimizerKind::Sgd),
            "momentum" => Some(OptimizerKind::Momentum),
            "rmsprop" => Some(OptimizerKind::RmsProp),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Hyper {
    pub fn defaults(kind: OptimizerKind) -> Self {
        let learning_rate = match kind {
            OptimizerKind::Sgd | OptimizerKind::Momentum => 1e-2,
            OptimizerKind::RmsProp | OptimizerKind::Adam => 1e-3,
        };
        Hyper {
            learning_rate,
            momentum: 0.9,
            rho: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(OptimError::Hyper(format!("{name} = {v} outside [0, 1)")))
            }
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::Hyper(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.epsilon > 0.0) {
            return Err(OptimError::Hyper(format!("epsilon {} must be positive", self.epsilon)));
        }
        unit("momentum", self.momentum)?;
        unit("rho", self.rho)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)
    }
}

/// Optimizer with per-parameter slots. `first` holds the momentum velocity
/// or Adam's first moment; `second` holds the squared-gradient average.
/// Slots are sized lazily on the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: Hyper,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Result<Self, OptimError> {
        hyper.validate()?;
        Ok(Optimizer {
            kind,
            hyper,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn with_defaults(kind: OptimizerKind) -> Self {
        Self::new(kind, Hyper::defaults(kind)).expect("defaults are valid")
    }

    /// Rebuilds a saved optimizer, e.g. from a checkpoint.
    pub fn from_parts(
        kind: OptimizerKind,
        hyper: Hyper,
        t: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self, OptimError> {
        hyper.validate()?;
        Ok(Optimizer {
            kind,
            hyper,
            t,
            first,
            second,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update to every `(parameter, gradient)` pair. Nothing is
    /// modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: Vec<(&mut Tensor, &Tensor)>) -> Result<(), OptimError> {
        for (param, (value, grad)) in params.iter().enumerate() {
            if value.len() != grad.len() {
                return Err(OptimError::GradientShape {
                    param,
                    value: value.len(),
                    grad: grad.len(),
                });
            }
            if let Some(index) = grad.data().iter().position(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient { param, index });
            }
        }
        if self.first.is_empty() && self.second.is_empty() {
            let zeros = |(v, _): &(&mut Tensor, &Tensor)| vec![0.0; v.len()];
            match self.kind {
                OptimizerKind::Sgd => {}
                OptimizerKind::Momentum => self.first = params.iter().map(zeros).collect(),
                OptimizerKind::RmsProp => self.second = params.iter().map(zeros).collect(),
                OptimizerKind::Adam => {
                    self.first = params.iter().map(zeros).collect();
                    self.second = params.iter().map(zeros).collect();
                }
            }
        }
        for slots in [&self.first, &self.second] {
            if !slots.is_empty() && slots.len() != params.len() {
                return Err(OptimError::SlotCount {
                    slots: slots.len(),
                    params: params.len(),
                });
            }
            for (param, (slot, (value, _))) in slots.iter().zip(&params).enumerate() {
                if slot.len() != value.len() {
                    return Err(OptimError::GradientShape {
                        param,
                        value: value.len(),
                        grad: slot.len(),
                    });
                }
            }
        }

        self.t += 1;
        let h = self.hyper;
        let alpha = h.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (value, grad) in params {
                    for (w, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= alpha * g;
                    }
                }
            }
            OptimizerKind::Momentum => {
                for ((value, grad), vel) in params.into_iter().zip(&mut self.first) {
                    for ((w, &g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(vel) {
                        *v = h.momentum * *v + alpha * g;
                        *w -= *v;
                    }
                }
            }
            OptimizerKind::RmsProp => {
                for ((value, grad), sq) in params.into_iter().zip(&mut self.second) {
                    for ((w, &g), s) in value.data_mut().iter_mut().zip(grad.data()).zip(sq) {
                        *s = h.rho * *s + (1.0 - h.rho) * g * g;
                        *w -= alpha * g / (s.sqrt() + h.epsilon);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as f64;
                let c1 = 1.0 - h.beta1.powf(t);
                let c2 = 1.0 - h.beta2.powf(t);
                for ((value, grad), (m, v)) in params.into_iter().zip(self.first.iter_mut().zip(&mut self.second)) {
                    for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= alpha * m_hat / (v_hat.sqrt() + h.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_opt(kind: OptimizerKind, lr: f64) -> Optimizer {
        let mut h = Hyper::defaults(kind);
        h.learning_rate = lr;
        Optimizer::new(kind, h).unwrap()
    }

    fn step_scalar(opt: &mut Optimizer, theta: f64, g: f64) -> f64 {
        let mut p = Tensor::from_values(&[1], vec![theta]).unwrap();
        let g = Tensor::from_values(&[1], vec![g]).unwrap();
        opt.step(vec![(&mut p, &g)]).unwrap();
        p.data()[0]
    }

    #[test]
    fn sgd_hand_example() {
        let mut opt = scalar_opt(OptimizerKind::Sgd, 0.1);
        assert!((step_scalar(&mut opt, 1.0, 0.5) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_constant_steps() {
        let mut opt = scalar_opt(OptimizerKind::Sgd, 0.1);
        let once = step_scalar(&mut opt, 2.0, 0.3);
        let twice = step_scalar(&mut opt, once, 0.3);
        assert!((twice - (2.0 - 2.0 * 0.1 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn momentum_second_step_displacement() {
        let mut h = Hyper::defaults(OptimizerKind::Momentum);
        h.learning_rate = 0.1;
        h.momentum = 0.5;
        let mut opt = Optimizer::new(OptimizerKind::Momentum, h).unwrap();
        let g = 0.8;
        let a = step_scalar(&mut opt, 0.0, g);
        let b = step_scalar(&mut opt, a, g);
        // v1 = αg, v2 = γαg + αg
        assert!((a - b - 0.15 * g).abs() < 1e-15);
    }

    #[test]
    fn momentum_first_step_is_sgd() {
        let mut m = scalar_opt(OptimizerKind::Momentum, 0.05);
        let mut s = scalar_opt(OptimizerKind::Sgd, 0.05);
        assert_eq!(step_scalar(&mut m, 0.7, -1.3), step_scalar(&mut s, 0.7, -1.3));
    }

    #[test]
    fn rmsprop_first_step() {
        let mut opt = scalar_opt(OptimizerKind::RmsProp, 1e-3);
        let (theta, g): (f64, f64) = (0.4, 2.5);
        let expected = theta - 1e-3 * g / ((0.1 * g * g).sqrt() + 1e-8);
        assert!((step_scalar(&mut opt, theta, g) - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step_is_nearly_scale_free() {
        let mut a = scalar_opt(OptimizerKind::RmsProp, 1e-3);
        let mut b = scalar_opt(OptimizerKind::RmsProp, 1e-3);
        let da = step_scalar(&mut a, 0.0, 0.3).abs();
        let db = step_scalar(&mut b, 0.0, 0.6).abs();
        assert!((da - db).abs() / da < 0.01);
    }

    #[test]
    fn adam_first_step_is_alpha_sign() {
        let mut opt = scalar_opt(OptimizerKind::Adam, 1e-3);
        let g: f64 = -0.37;
        let expected = 1e-3 * g / (g.abs() + 1e-8);
        assert!((step_scalar(&mut opt, 0.0, g) + expected).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn default_constants() {
        let h = Hyper::defaults(OptimizerKind::Adam);
        assert_eq!((h.beta1, h.beta2, h.epsilon, h.learning_rate), (0.9, 0.999, 1e-8, 1e-3));
        assert_eq!(Hyper::defaults(OptimizerKind::Sgd).learning_rate, 1e-2);
        assert_eq!(Hyper::defaults(OptimizerKind::RmsProp).rho, 0.9);
    }

    #[test]
    fn non_finite_gradient_rejects_the_whole_step() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::RmsProp, OptimizerKind::Adam] {
            let mut opt = Optimizer::with_defaults(kind);
            let mut a = Tensor::from_values(&[2], vec![1.0, 2.0]).unwrap();
            let mut b = Tensor::from_values(&[1], vec![3.0]).unwrap();
            let ga = Tensor::from_values(&[2], vec![0.1, 0.2]).unwrap();
            let gb = Tensor::from_values(&[1], vec![f64::NAN]).unwrap();
            let err = opt.step(vec![(&mut a, &ga), (&mut b, &gb)]).unwrap_err();
            assert_eq!(err, OptimError::NonFiniteGradient { param: 1, index: 0 });
            assert_eq!(a.data(), &[1.0, 2.0]);
            assert_eq!(opt.steps(), 0);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut h = Hyper::defaults(OptimizerKind::Adam);
        h.beta2 = 1.0;
        assert!(Optimizer::new(OptimizerKind::Adam, h).is_err());
        h = Hyper::defaults(OptimizerKind::Sgd);
        h.learning_rate = 0.0;
        assert!(Optimizer::new(OptimizerKind::Sgd, h).is_err());
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut opt = Optimizer::with_defaults(OptimizerKind::Adam);
        step_scalar(&mut opt, 1.0, 0.123456789);
        let back: Optimizer = serde_json::from_str(&serde_json::to_string(&opt).unwrap()).unwrap();
        assert_eq!(back, opt);
    }

    fn any_kind() -> impl Strategy<Value = OptimizerKind> {
        prop_oneof![
            Just(OptimizerKind::Sgd),
            Just(OptimizerKind::Momentum),
            Just(OptimizerKind::RmsProp),
            Just(OptimizerKind::Adam),
        ]
    }

    proptest! {
        #[test]
        fn zero_gradient_leaves_parameters(kind in any_kind(), theta in prop::collection::vec(-1e3f64..1e3, 1..8), steps in 1usize..5) {
            let mut opt = Optimizer::with_defaults(kind);
            let mut p = Tensor::from_values(&[theta.len()], theta.clone()).unwrap();
            let g = Tensor::zeros(&[theta.len()]).unwrap();
            for _ in 0..steps {
                opt.step(vec![(&mut p, &g)]).unwrap();
            }
            prop_assert_eq!(p.data(), &theta[..]);
        }

        #[test]
        fn adam_first_step_bounded_by_alpha(g in prop::collection::vec(-1e6f64..1e6, 1..8)) {
            prop_assume!(g.iter().all(|v| *v != 0.0));
            let mut opt = Optimizer::with_defaults(OptimizerKind::Adam);
            let mut p = Tensor::zeros(&[g.len()]).unwrap();
            let gt = Tensor::from_values(&[g.len()], g).unwrap();
            opt.step(vec![(&mut p, &gt)]).unwrap();
            for &w in p.data() {
                prop_assert!(w.abs() <= 1e-3 * (1.0 + 1e-12));
            }
        }

        #[test]
        fn momentum_without_decay_is_bitwise_sgd(
            theta in -10.0f64..10.0,
            grads in prop::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let mut h = Hyper::defaults(OptimizerKind::Momentum);
            h.momentum = 0.0;
            let mut m = Optimizer::new(OptimizerKind::Momentum, h).unwrap();
            let mut s = Optimizer::new(OptimizerKind::Sgd, h).unwrap();
            let (mut a, mut b) = (theta, theta);
            for g in grads {
                a = step_scalar(&mut m, a, g);
                b = step_scalar(&mut s, b, g);
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
