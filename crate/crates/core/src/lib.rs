//! Speculative decoding over a small decoder-only transformer: vanilla
//! greedy decoding, Medusa-style parallel draft heads, and regressive draft
//! heads with an attention decoder, an augmenting block and a shared LM head.

/// Unit-variant enum with lowercase string names for config files and flags.
macro_rules! str_enum {
    ($(#[$m:meta])* pub enum $name:ident { $($(#[$vm:meta])* $var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
        pub enum $name {
            $($(#[$vm])* #[serde(rename = $s)] $var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$var => $s),+
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err($crate::error::Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        s
                    ))),
                }
            }
        }
    };
}

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod error;
pub mod kvtext;
pub mod model;
pub mod numerics;
pub mod speculator;
pub mod token_tree;
pub mod training;

pub use error::{Error, Result};
