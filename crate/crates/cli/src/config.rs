use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;
use triport_core::noise::NoiseParams;
use triport_core::protocol::{ElementSet, Variant};

use crate::error::CliError;

/// Which artifacts a run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    Json,
    Csv,
    Both,
}

impl FormatChoice {
    pub fn wants_json(self) -> bool {
        matches!(self, FormatChoice::Json | FormatChoice::Both)
    }

    pub fn wants_csv(self) -> bool {
        matches!(self, FormatChoice::Csv | FormatChoice::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    Main,
    Feedforward,
}

impl VariantChoice {
    pub fn to_core(self) -> Variant {
        match self {
            VariantChoice::Main => Variant::Main,
            VariantChoice::Feedforward => Variant::FeedForward,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantChoice::Main => "main",
            VariantChoice::Feedforward => "feedforward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementsChoice {
    Ideal,
    Experimental,
}

impl ElementsChoice {
    pub fn to_core(self) -> ElementSet {
        match self {
            ElementsChoice::Ideal => ElementSet::Ideal,
            ElementsChoice::Experimental => ElementSet::Experimental,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementsChoice::Ideal => "ideal",
            ElementsChoice::Experimental => "experimental",
        }
    }
}

/// Noise flags shared by the commands that model imperfections; every flag
/// mirrors a `[noise]` key and overrides it.
#[derive(Debug, Clone, Copy, Default, Args)]
pub struct NoiseArgs {
    /// Pair-generation probability per source per pulse.
    #[arg(long, allow_negative_numbers = true)]
    pub p: Option<f64>,
    /// Per-photon detection efficiency.
    #[arg(long, allow_negative_numbers = true)]
    pub p_d: Option<f64>,
    /// Indistinguishability of photons from the same crystal.
    #[arg(long, allow_negative_numbers = true)]
    pub v_same: Option<f64>,
    /// Indistinguishability of photons from different crystals.
    #[arg(long, allow_negative_numbers = true)]
    pub v_cross: Option<f64>,
    /// Half-width of the splitter reflectivity perturbation.
    #[arg(long, allow_negative_numbers = true)]
    pub r_h_deviation: Option<f64>,
    /// Residual path phase noise, radians.
    #[arg(long, allow_negative_numbers = true)]
    pub phase_noise: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub format: Option<FormatChoice>,
    pub teleport: TeleportSection,
    #[serde(rename = "mub-suite")]
    pub mub_suite: SuiteSection,
    pub noise: NoiseSection,
    pub landscape: LandscapeSection,
    pub splitting: SplittingSection,
    pub hom: HomSection,
    pub decompose: DecomposeSection,
    pub witness: WitnessSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleportSection {
    pub input: Option<String>,
    pub variant: Option<VariantChoice>,
    pub elements: Option<ElementsChoice>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub variant: Option<VariantChoice>,
    pub elements: Option<ElementsChoice>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub p: Option<f64>,
    pub p_d: Option<f64>,
    pub v_same: Option<f64>,
    pub v_cross: Option<f64>,
    pub r_h_deviation: Option<f64>,
    pub phase_noise: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    pub p_d: Option<Vec<f64>>,
    pub p: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplittingSection {
    pub deviations: Option<Vec<f64>>,
    pub trials: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomSection {
    pub bandwidth_nm: Option<f64>,
    pub visibility: Option<f64>,
    pub delay_max_fs: Option<f64>,
    pub delay_step_fs: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    pub modes: Option<usize>,
    pub elements: Option<ElementsChoice>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WitnessSection {
    pub trials: Option<u32>,
}

/// Parses the optional configuration file; absent means all defaults.
pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Noise parameters from the defaults, the `[noise]` section, and flags, in
/// rising precedence, validated as a whole.
pub fn resolve_noise(section: &NoiseSection, flags: &NoiseArgs) -> Result<NoiseParams, CliError> {
    let d = NoiseParams::default();
    let params = NoiseParams {
        p: flags.p.or(section.p).unwrap_or(d.p),
        p_d: flags.p_d.or(section.p_d).unwrap_or(d.p_d),
        v_same: flags.v_same.or(section.v_same).unwrap_or(d.v_same),
        v_cross: flags.v_cross.or(section.v_cross).unwrap_or(d.v_cross),
        r_h_deviation: flags
            .r_h_deviation
            .or(section.r_h_deviation)
            .unwrap_or(d.r_h_deviation),
        phase_noise: flags
            .phase_noise
            .or(section.phase_noise)
            .unwrap_or(d.phase_noise),
    };
    params.validate()?;
    Ok(params)
}
