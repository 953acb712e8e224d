//! Adaptive-moment (Adam) updates with L2 regularization folded into the
//! gradient, the way `torch.optim.Adam(weight_decay=...)` applies it.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Anything exposing its trainable tensors in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Declares a named group of trainable matrices together with a twin struct
/// of tape handles, so one definition drives registration, gradient
/// collection, iteration order and serialization.
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident / $vars:ident {
            $( $(#[$fmeta:meta])* $field:ident ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $crate::linalg::Matrix, )*
        }

        /// Tape handles for each tensor of the matching parameter group.
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $( pub $field: $crate::autodiff::Var, )*
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn zeros_like(&self) -> Self {
                Self { $( $field: $crate::linalg::Matrix::zeros(self.$field.rows(), self.$field.cols()), )* }
            }

            pub fn register(&self, tape: &mut $crate::autodiff::Tape) -> $vars {
                $vars { $( $field: tape.leaf(self.$field.clone()), )* }
            }

            pub fn collect(&self, vars: &$vars, grads: &$crate::autodiff::Gradients) -> Self {
                Self { $( $field: grads.get_or_zeros(vars.$field, self.$field.shape()), )* }
            }

            pub fn named(&self) -> Vec<(&'static str, &$crate::linalg::Matrix)> {
                vec![$( (stringify!($field), &self.$field), )*]
            }

            /// `self += scale * other`
            pub fn axpy(&mut self, scale: f64, other: &Self) {
                $(
                    for (a, b) in self.$field.as_mut_slice().iter_mut().zip(other.$field.as_slice()) {
                        *a += scale * b;
                    }
                )*
            }
        }

        impl $crate::optim::ParamSet for $name {
            fn tensors(&self) -> Vec<&$crate::linalg::Matrix> {
                vec![$( &self.$field, )*]
            }
            fn tensors_mut(&mut self) -> Vec<&mut $crate::linalg::Matrix> {
                vec![$( &mut self.$field, )*]
            }
        }
    };
}
pub(crate) use param_group;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new<P: ParamSet + ?Sized>(cfg: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One descent step on a loss whose gradient is `grads`.
    pub fn step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &G) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k];
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            for (i, (w, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                let gi = gi + weight_decay * *w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                *w -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
