use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use kem_core::bandwidth::Method;
use kem_core::kem::SigmaMode;

/// Bandwidth constant used when none is given.
pub const DEFAULT_BANDWIDTH_CONSTANT: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Cv,
    Reg,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cv => Method::Cv,
            MethodArg::Reg => Method::Reg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaArg {
    Standard,
    PaperLiteral,
}

impl From<SigmaArg> for SigmaMode {
    fn from(m: SigmaArg) -> Self {
        match m {
            SigmaArg::Standard => SigmaMode::Standard,
            SigmaArg::PaperLiteral => SigmaMode::PaperLiteral,
        }
    }
}

/// Flags shared by every subcommand. Any of them may also come from a JSON
/// file given with `--config`; flags on the command line win.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Common {
    /// Input volume (.kvol, .json/.raw pair or .mhd) or phantom directory
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory for outputs
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of mixture components
    #[arg(long = "M")]
    #[serde(rename = "M")]
    pub m: Option<usize>,
    /// Sampling ratio in (0, 1]
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bandwidth selector
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub sigma_mode: Option<SigmaArg>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Odd kernel filter size; overrides the size derived from the bandwidth
    #[arg(long)]
    pub filter_size: Option<usize>,
    /// Bandwidth constant C_h in h = C_h * N^(-1/7)
    #[arg(long)]
    pub bandwidth_constant: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// JSON file with defaults for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

macro_rules! prefer {
    ($a:ident, $b:ident, $($f:ident),*) => {
        Common { $($f: $a.$f.or($b.$f),)* config: $a.config }
    };
}

impl Common {
    /// Fills unset flags from the `--config` file, if any.
    pub fn resolve(self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file = load_config(&path)?;
        let flags = self;
        Ok(prefer!(
            flags,
            file,
            input,
            out_dir,
            m,
            r,
            seed,
            method,
            sigma_mode,
            threads,
            filter_size,
            bandwidth_constant,
            max_iter,
            tol
        ))
    }

    pub fn input(&self) -> Result<&Path> {
        self.input.as_deref().context("--input is required")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().context("--out-dir is required")
    }

    pub fn components(&self) -> usize {
        self.m.unwrap_or(3)
    }

    pub fn ratio(&self) -> f64 {
        self.r.unwrap_or(1.0)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn method(&self) -> Method {
        self.method.unwrap_or(MethodArg::Reg).into()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode.map(Into::into).unwrap_or_default()
    }

    pub fn bandwidth_constant(&self) -> f64 {
        self.bandwidth_constant.unwrap_or(DEFAULT_BANDWIDTH_CONSTANT)
    }
}

fn load_config(path: &Path) -> Result<Common> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
