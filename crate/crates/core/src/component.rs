use std::fmt;

use serde::{Deserialize, Serialize};

/// The five cost centers a block is broken into for profiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    RMSNorm,
    GatedMLP,
    ConvTransform,
    StateSpace,
    FinalLinear,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::RMSNorm,
        Component::GatedMLP,
        Component::ConvTransform,
        Component::StateSpace,
        Component::FinalLinear,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::RMSNorm => "RMSNorm",
            Component::GatedMLP => "Gated MLP",
            Component::ConvTransform => "Conv. Transform",
            Component::StateSpace => "State Space",
            Component::FinalLinear => "Final Linear",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "rmsnorm" | "norm" => Ok(Component::RMSNorm),
            "gatedmlp" | "mlp" => Ok(Component::GatedMLP),
            "convtransform" | "conv" => Ok(Component::ConvTransform),
            "statespace" | "ssm" => Ok(Component::StateSpace),
            "finallinear" | "final" => Ok(Component::FinalLinear),
            _ => Err(format!("unknown component `{s}`")),
        }
    }
}

/// Prefill processes a whole prompt; decode advances cached state by one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Prefill,
    Decode,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Prefill => "prefill",
            Mode::Decode => "decode",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefill" => Ok(Mode::Prefill),
            "decode" => Ok(Mode::Decode),
            other => Err(format!("unknown mode `{other}` (expected prefill or decode)")),
        }
    }
}
