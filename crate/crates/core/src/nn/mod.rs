//! Layer descriptors, model assembly and complexity accounting.

mod complexity;
mod model;
mod spec;
mod truncate;

pub use complexity::{count_macs_params, Complexity, LayerCost};
pub use model::{Bound, Model, Param};
pub use spec::{marker, ActShape, ArchitectureSpec, Boundary, LayerKind, LayerSpec};
pub use truncate::{stem_convs, stem_len, truncate_for_cbc};

/// The architectures shipped with the crate (see `specs/`).
pub mod canonical {
    use super::ArchitectureSpec;
    use crate::error::{Error, Result};

    pub const FMNIST_BASE: &str = include_str!("../../specs/fmnist_base.toml");
    pub const FMNIST_DAE: &str = include_str!("../../specs/fmnist_dae.toml");
    pub const FMNIST_CBC: &str = include_str!("../../specs/fmnist_cbc.toml");
    pub const CIFAR_BASE: &str = include_str!("../../specs/cifar_base.toml");
    pub const CIFAR_DAE: &str = include_str!("../../specs/cifar_dae.toml");
    pub const CIFAR_CBC: &str = include_str!("../../specs/cifar_cbc.toml");

    /// Names accepted by [`by_name`].
    pub const NAMES: [&str; 8] = [
        "fmnist-base",
        "fmnist-dae",
        "fmnist-dae-cnn",
        "fmnist-cbc",
        "cifar-base",
        "cifar-dae",
        "cifar-dae-cnn",
        "cifar-cbc",
    ];

    fn parse(text: &str) -> ArchitectureSpec {
        ArchitectureSpec::from_toml(text).expect("shipped spec parses")
    }

    /// A canonical spec by name; `*-dae-cnn` is the DAE followed by the base CNN.
    pub fn by_name(name: &str) -> Result<ArchitectureSpec> {
        let spec = match name {
            "fmnist-base" => parse(FMNIST_BASE),
            "fmnist-dae" => parse(FMNIST_DAE),
            "fmnist-cbc" => parse(FMNIST_CBC),
            "cifar-base" => parse(CIFAR_BASE),
            "cifar-dae" => parse(CIFAR_DAE),
            "cifar-cbc" => parse(CIFAR_CBC),
            "fmnist-dae-cnn" => parse(FMNIST_DAE).then(name, &parse(FMNIST_BASE))?,
            "cifar-dae-cnn" => parse(CIFAR_DAE).then(name, &parse(CIFAR_BASE))?,
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture `{other}` (known: {})",
                    NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }
}
