use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BOTTLENECK: usize = 16;
pub const DEFAULT_PROMPTS: usize = 64;
pub const DEFAULT_PREFIX: usize = 32;
pub const DEFAULT_RANK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraScope {
    /// q, k, v and o projections.
    Att,
    /// Every linear map: attention, feed-forward and conformer pointwise convs.
    All,
}

/// One of the six injection methods with its hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PetlConfig {
    Adapter { bottleneck: usize },
    Prompt { n_prompts: usize },
    /// `mlp_hidden = None` means `d_model`.
    Prefix { n_prefix: usize, mlp_hidden: Option<usize> },
    BitFit,
    Ssf,
    Lora { rank: usize, scope: LoraScope },
}

impl PetlConfig {
    pub fn adapter() -> Self {
        PetlConfig::Adapter {
            bottleneck: DEFAULT_BOTTLENECK,
        }
    }

    pub fn prompt() -> Self {
        PetlConfig::Prompt {
            n_prompts: DEFAULT_PROMPTS,
        }
    }

    pub fn prefix() -> Self {
        PetlConfig::Prefix {
            n_prefix: DEFAULT_PREFIX,
            mlp_hidden: None,
        }
    }

    pub fn lora() -> Self {
        PetlConfig::Lora {
            rank: DEFAULT_RANK,
            scope: LoraScope::All,
        }
    }

    /// The six methods at their default hyper-parameters.
    pub fn defaults() -> [PetlConfig; 6] {
        [
            Self::adapter(),
            Self::prompt(),
            Self::prefix(),
            PetlConfig::BitFit,
            PetlConfig::Ssf,
            Self::lora(),
        ]
    }

    /// The hyper-parameter sweeps: adapter bottleneck {8, 16, 32}, prefix
    /// count {16, 32, 64}, and LoRA rank {1, 2, 4} in both scopes.
    pub fn ablation_grid() -> Vec<PetlConfig> {
        let mut grid: Vec<PetlConfig> = [8, 16, 32]
            .map(|bottleneck| PetlConfig::Adapter { bottleneck })
            .into();
        grid.extend([16, 32, 64].map(|n_prefix| PetlConfig::Prefix {
            n_prefix,
            mlp_hidden: None,
        }));
        for scope in [LoraScope::Att, LoraScope::All] {
            grid.extend([1, 2, 4].map(|rank| PetlConfig::Lora { rank, scope }));
        }
        grid
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PetlConfig::Adapter { bottleneck: 0 } => Err(Error::invalid("method.bottleneck", "must be at least 1")),
            PetlConfig::Lora { rank: 0, .. } => Err(Error::invalid("method.rank", "must be at least 1")),
            PetlConfig::Prefix {
                mlp_hidden: Some(0), ..
            } => Err(Error::invalid("method.mlp_hidden", "must be positive")),
            _ => Ok(()),
        }
    }
}

/// How a backbone is adapted: probing, full fine-tuning, or one PETL method.
///
/// In configuration files this is a table with a `kind` key, e.g.
/// `{ kind = "lora", rank = 2, scope = "all" }`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "MethodRepr", into = "MethodRepr")]
pub enum Method {
    Probing,
    FineTune,
    Petl(PetlConfig),
}

impl Method {
    pub fn petl(&self) -> Option<&PetlConfig> {
        match self {
            Method::Petl(cfg) => Some(cfg),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Petl(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Probing => "probing",
            Method::FineTune => "fine_tune",
            Method::Petl(PetlConfig::Adapter { .. }) => "adapter",
            Method::Petl(PetlConfig::Prompt { .. }) => "prompt",
            Method::Petl(PetlConfig::Prefix { .. }) => "prefix",
            Method::Petl(PetlConfig::BitFit) => "bitfit",
            Method::Petl(PetlConfig::Ssf) => "ssf",
            Method::Petl(PetlConfig::Lora { .. }) => "lora",
        }
    }

    /// `key=value` pairs joined by `;`, empty for methods without knobs.
    pub fn hyperparams(&self) -> String {
        match *self {
            Method::Petl(PetlConfig::Adapter { bottleneck }) => format!("bottleneck={bottleneck}"),
            Method::Petl(PetlConfig::Prompt { n_prompts }) => format!("n_prompts={n_prompts}"),
            Method::Petl(PetlConfig::Prefix { n_prefix, mlp_hidden }) => match mlp_hidden {
                Some(h) => format!("n_prefix={n_prefix};mlp_hidden={h}"),
                None => format!("n_prefix={n_prefix}"),
            },
            Method::Petl(PetlConfig::Lora { rank, scope }) => {
                let scope = match scope {
                    LoraScope::Att => "att",
                    LoraScope::All => "all",
                };
                format!("rank={rank};scope={scope}")
            }
            _ => String::new(),
        }
    }

    /// Probing, fine-tuning and the six methods at defaults.
    pub fn table_rows() -> [Method; 8] {
        let [a, b, c, d, e, f] = PetlConfig::defaults().map(Method::Petl);
        [Method::FineTune, Method::Probing, a, b, c, d, e, f]
    }
}

impl From<PetlConfig> for Method {
    fn from(cfg: PetlConfig) -> Self {
        Method::Petl(cfg)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum MethodRepr {
    Probing,
    #[serde(alias = "ft")]
    FineTune,
    Adapter {
        #[serde(default = "bottleneck")]
        bottleneck: usize,
    },
    Prompt {
        #[serde(default = "prompts")]
        n_prompts: usize,
    },
    Prefix {
        #[serde(default = "prefix")]
        n_prefix: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mlp_hidden: Option<usize>,
    },
    Bitfit,
    Ssf,
    Lora {
        #[serde(default = "rank")]
        rank: usize,
        #[serde(default = "scope")]
        scope: LoraScope,
    },
}

fn bottleneck() -> usize {
    DEFAULT_BOTTLENECK
}
fn prompts() -> usize {
    DEFAULT_PROMPTS
}
fn prefix() -> usize {
    DEFAULT_PREFIX
}
fn rank() -> usize {
    DEFAULT_RANK
}
fn scope() -> LoraScope {
    LoraScope::All
}

impl From<MethodRepr> for Method {
    fn from(r: MethodRepr) -> Self {
        match r {
            MethodRepr::Probing => Method::Probing,
            MethodRepr::FineTune => Method::FineTune,
            MethodRepr::Adapter { bottleneck } => PetlConfig::Adapter { bottleneck }.into(),
            MethodRepr::Prompt { n_prompts } => PetlConfig::Prompt { n_prompts }.into(),
            MethodRepr::Prefix { n_prefix, mlp_hidden } => PetlConfig::Prefix { n_prefix, mlp_hidden }.into(),
            MethodRepr::Bitfit => PetlConfig::BitFit.into(),
            MethodRepr::Ssf => PetlConfig::Ssf.into(),
            MethodRepr::Lora { rank, scope } => PetlConfig::Lora { rank, scope }.into(),
        }
    }
}

impl From<Method> for MethodRepr {
    fn from(m: Method) -> Self {
        match m {
            Method::Probing => MethodRepr::Probing,
            Method::FineTune => MethodRepr::FineTune,
            Method::Petl(PetlConfig::Adapter { bottleneck }) => MethodRepr::Adapter { bottleneck },
            Method::Petl(PetlConfig::Prompt { n_prompts }) => MethodRepr::Prompt { n_prompts },
            Method::Petl(PetlConfig::Prefix { n_prefix, mlp_hidden }) => MethodRepr::Prefix { n_prefix, mlp_hidden },
            Method::Petl(PetlConfig::BitFit) => MethodRepr::Bitfit,
            Method::Petl(PetlConfig::Ssf) => MethodRepr::Ssf,
            Method::Petl(PetlConfig::Lora { rank, scope }) => MethodRepr::Lora { rank, scope },
        }
    }
}
