//! Bundled scenario files.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Preset {
    pub name: &'static str,
    pub text: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "fig1_subsets",
        text: include_str!("../presets/fig1_subsets.toml"),
    },
    Preset {
        name: "fig2_gcbf_subsets",
        text: include_str!("../presets/fig2_gcbf_subsets.toml"),
    },
    Preset {
        name: "fig3_sphere_subsets",
        text: include_str!("../presets/fig3_sphere_subsets.toml"),
    },
    Preset {
        name: "fig5_cbf_nmpc",
        text: include_str!("../presets/fig5_cbf_nmpc.toml"),
    },
    Preset {
        name: "fig5_mpc_cbf",
        text: include_str!("../presets/fig5_mpc_cbf.toml"),
    },
    Preset {
        name: "fig5_mpc_gcbf",
        text: include_str!("../presets/fig5_mpc_gcbf.toml"),
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// `(name, description)` of the bundled presets.
pub fn list_bundled() -> Result<Vec<(String, String)>, CliError> {
    PRESETS
        .iter()
        .map(|p| Ok((p.name.to_string(), describe(p.text)?)))
        .collect()
}

/// `(name, description)` of every `*.toml` file in `dir`, sorted by name.
pub fn list_dir(dir: &Path) -> Result<Vec<(String, String)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = fs::read_to_string(&path)?;
        let description = describe(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        out.push((name, description));
    }
    out.sort();
    Ok(out)
}

fn describe(text: &str) -> Result<String, CliError> {
    Ok(ExperimentConfig::from_toml(text)?.description)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_plans() {
        for p in PRESETS {
            let cfg = ExperimentConfig::from_toml(p.text).unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert!(!cfg.description.is_empty(), "{}", p.name);
            cfg.plan().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
    }

    #[test]
    fn listing_includes_fig1() {
        let list = list_bundled().unwrap();
        let (_, d) = list.iter().find(|(n, _)| n == "fig1_subsets").unwrap();
        assert!(d.contains("CBF-NMPC"));
    }
}
