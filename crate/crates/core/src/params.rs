//! Named parameter groups.
//!
//! Every group is generic over its leaf type: `Tensor` for storage, `Var`
//! once bound to a [`Graph`](crate::Graph). `map` converts between the two,
//! and `visit`/`visit_mut` walk the leaves with their dotted names in a fixed
//! order, which is also the order they appear in checkpoints.

use crate::tensor::{SeededRng, Tensor};

macro_rules! param_group {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T = Tensor> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

pub(crate) use param_group;

param_group! {
    /// Fully connected layer, `x · weight + bias` with `weight: in×out`.
    pub struct Dense { weight, bias }
}

param_group! {
    pub struct NormParams { gain, bias }
}

impl Dense {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Dense {
            weight: Tensor::xavier(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

impl NormParams {
    pub fn init(width: usize) -> Self {
        NormParams {
            gain: Tensor::full(&[width], 1.0),
            bias: Tensor::zeros(&[width]),
        }
    }
}
