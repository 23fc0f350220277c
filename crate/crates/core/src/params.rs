//! Named parameter groups and their graph bindings.

use crate::tensor::{Real, Tensor};

/// Declares a parameter struct whose fields are all tensors, plus a matching
/// struct of graph handles.
///
/// Generated items: `bind` (load every tensor into a graph as a leaf),
/// `tensors` / `tensors_mut` (name-ordered access), `cast`, and
/// `Vars::vars` (handles in the same order as `tensors`).
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident / $vars:ident {
            $( $(#[$fmeta:meta])* $field:ident ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $( $(#[$fmeta])* pub $field: $crate::tensor::Tensor<T>, )*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $( pub $field: $crate::tensor::Var, )*
        }

        impl<T: $crate::tensor::Real> $name<T> {
            pub fn bind(&self, g: &mut $crate::tensor::Graph<T>, trainable: bool) -> $vars {
                $vars { $( $field: g.leaf(self.$field.clone(), trainable), )* }
            }

            pub fn tensors(&self) -> Vec<(&'static str, &$crate::tensor::Tensor<T>)> {
                vec![ $( (stringify!($field), &self.$field), )* ]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut $crate::tensor::Tensor<T>)> {
                vec![ $( (stringify!($field), &mut self.$field), )* ]
            }

            pub fn cast<U: $crate::tensor::Real>(&self) -> $name<U> {
                $name { $( $field: self.$field.cast(), )* }
            }

            pub fn is_finite(&self) -> bool {
                true $( && self.$field.data().iter().all(|v| v.is_finite()) )*
            }
        }

        impl $vars {
            pub fn vars(&self) -> Vec<$crate::tensor::Var> {
                vec![ $( self.$field, )* ]
            }
        }
    };
}

pub(crate) use param_group;

/// Trainable parameter partition used by the staged schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Connector,
    Decoder,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Connector => "connector",
            Group::Decoder => "decoder",
        }
    }
}

/// Order-sensitive checksum of a tensor list (FNV-1a over the raw bits).
pub fn checksum<'a, T: Real + 'a>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut bytes = Vec::new();
    for t in tensors {
        bytes.clear();
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        for &b in &bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
